//! Benchmark environments: GridWorld, M-ObjectWorld and M-BinaryWorld.
//!
//! Every environment is a pure function of its [`EnvParams`] and a layout
//! seed, so an environment can be archived as `(params, seed)` and rebuilt
//! bit-exactly. The text format written by [`write_env`] carries the full
//! per-state table as well, and [`read_env`] checks it against the rebuilt
//! environment.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{optimal_policy, Policy, StochasticPolicy, TabularMdp, DEFAULT_DISCOUNT};

/// Reward table shared by both multi-intention worlds: rows are intentions
/// A..F, columns are reward rules 1..3.
pub const INTENTION_TABLE: [[f64; 3]; 6] = [
    [5.0, -10.0, 0.0],
    [-10.0, 0.0, 5.0],
    [0.0, 5.0, -10.0],
    [-10.0, 5.0, 0.0],
    [5.0, 0.0, -10.0],
    [0.0, -10.0, 5.0],
];

pub const INTENTION_NAMES: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

const GRIDWORLD_SIZE: usize = 8;
const GRIDWORLD_REGION: usize = 2;
const GRIDWORLD_INTENTIONS: usize = 3;
const GRIDWORLD_NOISE: f64 = 0.2;
const GRIDWORLD_WEIGHT_DENSITY: f64 = 0.2;
const MWORLD_NOISE: f64 = 0.3;

/// Expert sampling solves the true MDP tighter than the default.
const EXPERT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EnvKind {
    GridWorld,
    MObjectWorld,
    MBinaryWorld,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::GridWorld => "gridworld",
            EnvKind::MObjectWorld => "objectworld",
            EnvKind::MBinaryWorld => "binaryworld",
        }
    }

    pub fn n_intentions(self) -> usize {
        match self {
            EnvKind::GridWorld => GRIDWORLD_INTENTIONS,
            _ => INTENTION_TABLE.len(),
        }
    }

    /// Demonstration length used by the reference experiments.
    pub fn default_demo_length(self) -> usize {
        match self {
            EnvKind::GridWorld => 40,
            _ => 8,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gridworld" | "grid" => Ok(EnvKind::GridWorld),
            "objectworld" | "m-objectworld" | "mobjectworld" => Ok(EnvKind::MObjectWorld),
            "binaryworld" | "m-binaryworld" | "mbinaryworld" => Ok(EnvKind::MBinaryWorld),
            other => Err(Error::Parse(format!("unknown environment kind '{other}'"))),
        }
    }
}

/// Reward rule label of a multi-intention world cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    One,
    Two,
    Three,
}

impl Rule {
    pub fn index(self) -> usize {
        match self {
            Rule::One => 0,
            Rule::Two => 1,
            Rule::Three => 2,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }
}

/// Table lookup of the reward an intention (0 = A .. 5 = F) assigns to a rule.
pub fn table_reward(intention: usize, rule: Rule) -> f64 {
    INTENTION_TABLE[intention][rule.index()]
}

/// Parses intention letters such as `"A,B,C"` or `"ABC"` into indices.
pub fn parse_intentions(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for ch in spec.chars().filter(|c| !c.is_whitespace() && *c != ',') {
        if let Some(idx) = INTENTION_NAMES
            .iter()
            .position(|n| *n == ch.to_ascii_uppercase())
        {
            out.push(idx);
        } else if let Some(d) = ch.to_digit(10) {
            out.push(d as usize);
        } else {
            return Err(Error::Parse(format!("unknown intention '{ch}'")));
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("empty intention list".into()));
    }
    Ok(out)
}

/// M-ObjectWorld rule from the distances to the nearest outer-color-1 and
/// outer-color-2 objects.
pub fn objectworld_rule(dist_outer1: f64, dist_outer2: f64) -> Rule {
    if dist_outer1 <= 3.0 && dist_outer2 <= 2.0 {
        Rule::One
    } else if dist_outer1 <= 3.0 {
        Rule::Two
    } else {
        Rule::Three
    }
}

/// M-BinaryWorld rule from the number of color-1 cells in the 3×3 block.
pub fn binaryworld_rule(color_one_count: usize) -> Rule {
    match color_one_count {
        4 => Rule::One,
        5 => Rule::Two,
        _ => Rule::Three,
    }
}

/// Everything that determines an environment apart from its layout seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvParams {
    pub kind: EnvKind,
    /// Grid side length.
    pub size: usize,
    /// M-ObjectWorld only.
    pub n_objects: usize,
    /// Number of inner and of outer colors (M-ObjectWorld only).
    pub n_colors: usize,
}

impl EnvParams {
    pub fn gridworld() -> Self {
        Self {
            kind: EnvKind::GridWorld,
            size: GRIDWORLD_SIZE,
            n_objects: 0,
            n_colors: 0,
        }
    }

    pub fn objectworld(size: usize, n_objects: usize, n_colors: usize) -> Self {
        Self {
            kind: EnvKind::MObjectWorld,
            size,
            n_objects,
            n_colors,
        }
    }

    pub fn binaryworld(size: usize) -> Self {
        Self {
            kind: EnvKind::MBinaryWorld,
            size,
            n_objects: 0,
            n_colors: 2,
        }
    }

    /// 32×32 multi-intention worlds, 50 objects with 2 colors.
    pub fn paper_scale(kind: EnvKind) -> Self {
        match kind {
            EnvKind::GridWorld => Self::gridworld(),
            EnvKind::MObjectWorld => Self::objectworld(32, 50, 2),
            EnvKind::MBinaryWorld => Self::binaryworld(32),
        }
    }

    /// 16×16 multi-intention worlds; the object count keeps the paper-scale density.
    pub fn desk_scale(kind: EnvKind) -> Self {
        match kind {
            EnvKind::GridWorld => Self::gridworld(),
            EnvKind::MObjectWorld => Self::objectworld(16, 12, 2),
            EnvKind::MBinaryWorld => Self::binaryworld(16),
        }
    }

    pub fn n_states(&self) -> usize {
        self.size * self.size
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            EnvKind::GridWorld => (self.size / GRIDWORLD_REGION).pow(2),
            EnvKind::MObjectWorld => 2 * self.n_colors * self.size,
            EnvKind::MBinaryWorld => 9,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            EnvKind::GridWorld => {
                if self.size != GRIDWORLD_SIZE {
                    return Err(Error::InvalidArgument(format!(
                        "GridWorld is {GRIDWORLD_SIZE}x{GRIDWORLD_SIZE}, got size {}",
                        self.size
                    )));
                }
            }
            EnvKind::MObjectWorld => {
                if self.n_objects < 2 || self.n_colors < 2 {
                    return Err(Error::InvalidArgument(
                        "M-ObjectWorld needs at least 2 objects and 2 colors".into(),
                    ));
                }
                if self.n_objects > self.n_states() {
                    return Err(Error::InvalidArgument(format!(
                        "{} objects do not fit on {} cells",
                        self.n_objects,
                        self.n_states()
                    )));
                }
            }
            EnvKind::MBinaryWorld => {}
        }
        if self.size < 2 {
            return Err(Error::InvalidArgument("grid size must be >= 2".into()));
        }
        Ok(())
    }
}

/// An object of M-ObjectWorld.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldObject {
    pub row: usize,
    pub col: usize,
    pub inner: usize,
    pub outer: usize,
}

/// The randomized part of an environment.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Per-intention region weights.
    Regions(Vec<Vec<f64>>),
    Objects(Vec<WorldObject>),
    /// Per-cell color, `true` for color one.
    Colors(Vec<bool>),
}

/// An MDP with state features and ground-truth intention rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkEnv {
    pub params: EnvParams,
    pub layout_seed: u64,
    pub mdp: TabularMdp,
    /// `n_states × feature_dim`, entries 0 or 1.
    pub features: Array2<f64>,
    /// `None` for GridWorld.
    pub rule_labels: Option<Vec<Rule>>,
    pub true_rewards: Vec<Vec<f64>>,
    pub layout: Layout,
}

impl BenchmarkEnv {
    pub fn generate(params: EnvParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match params.kind {
            EnvKind::GridWorld => build_gridworld(params, seed, &mut rng),
            EnvKind::MObjectWorld => build_objectworld(params, seed, &mut rng),
            EnvKind::MBinaryWorld => build_binaryworld(params, seed, &mut rng),
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.params.kind
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_intentions(&self) -> usize {
        self.true_rewards.len()
    }
}

pub fn make_gridworld(seed: u64) -> Result<BenchmarkEnv> {
    BenchmarkEnv::generate(EnvParams::gridworld(), seed)
}

/// Paper-scale (32×32) M-ObjectWorld with `n_objects` objects and as many
/// inner as outer colors.
pub fn make_objectworld(
    seed: u64,
    n_objects: usize,
    n_outer_colors: usize,
) -> Result<BenchmarkEnv> {
    BenchmarkEnv::generate(EnvParams::objectworld(32, n_objects, n_outer_colors), seed)
}

/// Paper-scale (32×32) M-BinaryWorld.
pub fn make_binaryworld(seed: u64) -> Result<BenchmarkEnv> {
    BenchmarkEnv::generate(EnvParams::binaryworld(32), seed)
}

/// True reward vector of `intention`.
pub fn intention_reward(env: &BenchmarkEnv, intention: usize) -> Result<&[f64]> {
    env.true_rewards
        .get(intention)
        .map(Vec::as_slice)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "intention {intention} out of range for {} ({} intentions)",
                env.kind(),
                env.n_intentions()
            ))
        })
}

/// Same kind and parameters, freshly randomized layout.
pub fn transfer_env(env: &BenchmarkEnv, seed: u64) -> Result<BenchmarkEnv> {
    BenchmarkEnv::generate(env.params, seed)
}

// Actions: north, south, east, west, and (for the M-worlds) stay.
const MOVES: [(isize, isize); 5] = [(-1, 0), (1, 0), (0, 1), (0, -1), (0, 0)];

fn grid_step(size: usize, state: usize, action: usize) -> usize {
    let (row, col) = ((state / size) as isize, (state % size) as isize);
    let (dr, dc) = MOVES[action];
    let (nr, nc) = (row + dr, col + dc);
    if nr < 0 || nc < 0 || nr >= size as isize || nc >= size as isize {
        state
    } else {
        nr as usize * size + nc as usize
    }
}

/// `random_over_all`: noise re-draws among all actions (may coincide with the
/// intended one); otherwise noise picks one of the other actions uniformly.
fn grid_mdp(
    size: usize,
    n_actions: usize,
    noise: f64,
    random_over_all: bool,
) -> Result<TabularMdp> {
    let n_states = size * size;
    let mut rows = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for intended in 0..n_actions {
            let row = (0..n_actions)
                .map(|actual| {
                    let p = if random_over_all {
                        noise / n_actions as f64
                            + if actual == intended { 1.0 - noise } else { 0.0 }
                    } else if actual == intended {
                        1.0 - noise
                    } else {
                        noise / (n_actions - 1) as f64
                    };
                    (grid_step(size, s, actual), p)
                })
                .collect();
            rows.push(row);
        }
    }
    TabularMdp::new(
        n_states,
        n_actions,
        rows,
        DEFAULT_DISCOUNT,
        vec![1.0 / n_states as f64; n_states],
    )
}

fn mworld_rewards(labels: &[Rule]) -> Vec<Vec<f64>> {
    (0..INTENTION_TABLE.len())
        .map(|i| labels.iter().map(|&r| table_reward(i, r)).collect())
        .collect()
}

fn build_gridworld(params: EnvParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<BenchmarkEnv> {
    let size = params.size;
    let regions_per_side = size / GRIDWORLD_REGION;
    let n_regions = regions_per_side * regions_per_side;
    let n_states = size * size;

    let mut features = Array2::zeros((n_states, n_regions));
    for s in 0..n_states {
        let (row, col) = (s / size, s % size);
        let region = (row / GRIDWORLD_REGION) * regions_per_side + col / GRIDWORLD_REGION;
        features[[s, region]] = 1.0;
    }

    let weights: Vec<Vec<f64>> = (0..GRIDWORLD_INTENTIONS)
        .map(|_| loop {
            let w: Vec<f64> = (0..n_regions)
                .map(|_| {
                    if rng.gen_bool(GRIDWORLD_WEIGHT_DENSITY) {
                        rng.gen_range(-1.0..=1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            if w.iter().any(|&x| x != 0.0) {
                break w;
            }
        })
        .collect();

    let true_rewards = weights
        .iter()
        .map(|w| {
            features
                .rows()
                .into_iter()
                .map(|f| f.iter().zip(w).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    Ok(BenchmarkEnv {
        params,
        layout_seed: seed,
        mdp: grid_mdp(size, 4, GRIDWORLD_NOISE, true)?,
        features,
        rule_labels: None,
        true_rewards,
        layout: Layout::Regions(weights),
    })
}

fn build_objectworld(params: EnvParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<BenchmarkEnv> {
    let size = params.size;
    let n_states = size * size;
    let n_colors = params.n_colors;

    let cells = sample_indices(rng, n_states, params.n_objects).into_vec();
    let objects: Vec<WorldObject> = cells
        .into_iter()
        .map(|cell| WorldObject {
            row: cell / size,
            col: cell % size,
            inner: rng.gen_range(0..n_colors),
            outer: rng.gen_range(0..n_colors),
        })
        .collect();

    // nearest[(outer=0 | inner=1) * n_colors + c] for each state
    let mut features = Array2::zeros((n_states, params.feature_dim()));
    let mut labels = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let (row, col) = ((s / size) as f64, (s % size) as f64);
        let mut nearest = vec![f64::INFINITY; 2 * n_colors];
        for obj in &objects {
            let d = ((obj.row as f64 - row).powi(2) + (obj.col as f64 - col).powi(2)).sqrt();
            let outer = &mut nearest[obj.outer];
            *outer = outer.min(d);
            let inner = &mut nearest[n_colors + obj.inner];
            *inner = inner.min(d);
        }
        for (block, &dist) in nearest.iter().enumerate() {
            for d in 1..=size {
                if dist <= d as f64 {
                    features[[s, block * size + d - 1]] = 1.0;
                }
            }
        }
        labels.push(objectworld_rule(nearest[0], nearest[1]));
    }

    Ok(BenchmarkEnv {
        params,
        layout_seed: seed,
        mdp: grid_mdp(size, 5, MWORLD_NOISE, false)?,
        features,
        true_rewards: mworld_rewards(&labels),
        rule_labels: Some(labels),
        layout: Layout::Objects(objects),
    })
}

fn build_binaryworld(params: EnvParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<BenchmarkEnv> {
    let size = params.size;
    let n_states = size * size;
    let colors: Vec<bool> = (0..n_states).map(|_| rng.gen_bool(0.5)).collect();

    let mut features = Array2::zeros((n_states, 9));
    let mut labels = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let (row, col) = ((s / size) as isize, (s % size) as isize);
        let mut count = 0;
        for (k, (dr, dc)) in (-1..=1)
            .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
            .enumerate()
        {
            let (r, c) = (row + dr, col + dc);
            let inside = r >= 0 && c >= 0 && r < size as isize && c < size as isize;
            if inside && colors[r as usize * size + c as usize] {
                features[[s, k]] = 1.0;
                count += 1;
            }
        }
        labels.push(binaryworld_rule(count));
    }

    Ok(BenchmarkEnv {
        params,
        layout_seed: seed,
        mdp: grid_mdp(size, 5, MWORLD_NOISE, false)?,
        features,
        true_rewards: mworld_rewards(&labels),
        rule_labels: Some(labels),
        layout: Layout::Colors(colors),
    })
}

/// A demonstration: `(state, action)` pairs in visiting order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    /// Ground truth, for evaluation only.
    pub true_intention: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|&(s, _)| s)
    }
}

fn sample_successor<R: Rng>(mdp: &TabularMdp, state: usize, action: usize, rng: &mut R) -> usize {
    let row = mdp.successors(state, action);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(next, p) in row {
        acc += p;
        if u < acc {
            return next;
        }
    }
    row[row.len() - 1].0
}

fn sample_from<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Rolls out `length` steps of `policy` from a start state drawn from the
/// MDP's start distribution.
pub fn rollout<R: Rng>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    length: usize,
    rng: &mut R,
) -> Trajectory {
    let mut state = sample_from(mdp.start_distribution(), rng);
    let mut steps = Vec::with_capacity(length);
    for _ in 0..length {
        let action = sample_from(policy.action_probs(state), rng);
        steps.push((state, action));
        state = sample_successor(mdp, state, action, rng);
    }
    Trajectory {
        steps,
        true_intention: None,
    }
}

/// Expert demonstrations of `intention`: rollouts of the optimal policy for
/// its true reward.
pub fn sample_demonstrations(
    env: &BenchmarkEnv,
    intention: usize,
    count: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if length == 0 {
        return Err(Error::InvalidArgument(
            "demonstration length must be >= 1".into(),
        ));
    }
    let reward = intention_reward(env, intention)?;
    let (expert, _) = optimal_policy(&env.mdp, reward, EXPERT_TOLERANCE)?;
    debug_assert_eq!(expert.n_states(), env.n_states());
    let policy = StochasticPolicy::from_deterministic(&expert, env.mdp.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut traj = rollout(&env.mdp, &policy, length, &mut rng);
            traj.true_intention = Some(intention);
            traj
        })
        .collect())
}

/// Demonstrations for several intentions, `per_intention` each, in intention order.
pub fn sample_mixture_demonstrations(
    env: &BenchmarkEnv,
    intentions: &[usize],
    per_intention: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos = Vec::with_capacity(intentions.len() * per_intention);
    for &intention in intentions {
        let sub_seed = rng.gen();
        demos.extend(sample_demonstrations(
            env,
            intention,
            per_intention,
            length,
            sub_seed,
        )?);
    }
    Ok(demos)
}

const ENV_MAGIC: &str = "miirl-env v1";

/// Writes the plain-text environment format:
///
/// ```text
/// miirl-env v1
/// kind=<kind> size=<n> seed=<u64> n_objects=<n> n_colors=<n> states=<n> actions=<n> features=<d> intentions=<k>
/// <state> <rule 1|2|3 or -> <feature bits> <reward_0> ... <reward_{k-1}>
/// ```
pub fn write_env<W: Write>(env: &BenchmarkEnv, mut out: W) -> std::io::Result<()> {
    let p = &env.params;
    writeln!(out, "{ENV_MAGIC}")?;
    writeln!(
        out,
        "kind={} size={} seed={} n_objects={} n_colors={} states={} actions={} features={} intentions={}",
        p.kind,
        p.size,
        env.layout_seed,
        p.n_objects,
        p.n_colors,
        env.n_states(),
        env.mdp.n_actions(),
        env.feature_dim(),
        env.n_intentions()
    )?;
    for s in 0..env.n_states() {
        write!(out, "{}", format_state_row(env, s))?;
        writeln!(out)?;
    }
    Ok(())
}

fn format_state_row(env: &BenchmarkEnv, s: usize) -> String {
    let rule = env
        .rule_labels
        .as_ref()
        .map_or_else(|| "-".to_string(), |l| l[s].number().to_string());
    let bits: String = env
        .features
        .row(s)
        .iter()
        .map(|&f| if f != 0.0 { '1' } else { '0' })
        .collect();
    let mut row = format!("{s} {rule} {bits}");
    for reward in &env.true_rewards {
        row.push(' ');
        row.push_str(&reward[s].to_string());
    }
    row
}

/// Reads the format written by [`write_env`], rebuilding the environment
/// from its header and verifying every state row.
pub fn read_env<R: BufRead>(input: R) -> Result<BenchmarkEnv> {
    let mut lines = input.lines();
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of environment file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))
    };
    if next_line()?.trim() != ENV_MAGIC {
        return Err(Error::Parse("missing environment header".into()));
    }
    let header = next_line()?;
    let field = |key: &str| -> Result<&str> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| Error::Parse(format!("header lacks '{key}'")))
    };
    let num = |key: &str| -> Result<u64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("bad value for '{key}'")))
    };
    let params = EnvParams {
        kind: field("kind")?.parse()?,
        size: num("size")? as usize,
        n_objects: num("n_objects")? as usize,
        n_colors: num("n_colors")? as usize,
    };
    let env = BenchmarkEnv::generate(params, num("seed")?)?;
    for s in 0..env.n_states() {
        let line = next_line()?;
        if line.trim_end() != format_state_row(&env, s) {
            return Err(Error::Parse(format!(
                "state row {s} does not match the regenerated environment"
            )));
        }
    }
    Ok(env)
}

const DEMOS_MAGIC: &str = "miirl-demos v1";

/// Writes demonstrations one per line after a header line:
///
/// ```text
/// miirl-demos v1
/// <true intention or -> <state>:<action> <state>:<action> ...
/// ```
pub fn write_demos<W: Write>(demos: &[Trajectory], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{DEMOS_MAGIC}")?;
    for d in demos {
        match d.true_intention {
            Some(i) => write!(out, "{i}")?,
            None => write!(out, "-")?,
        }
        for &(s, a) in &d.steps {
            write!(out, " {s}:{a}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads the format written by [`write_demos`]. Blank lines are skipped.
pub fn read_demos<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut lines = input.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Parse("empty demonstrations file".into()))?
        .map_err(|e| Error::Parse(e.to_string()))?;
    if magic.trim() != DEMOS_MAGIC {
        return Err(Error::Parse("missing demonstrations header".into()));
    }
    let mut demos = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        let mut tokens = line.split_whitespace();
        let Some(label) = tokens.next() else { continue };
        let bad = |what: &str| Error::Parse(format!("demonstration {}: bad {what}", n + 1));
        let true_intention = match label {
            "-" => None,
            l => Some(l.parse().map_err(|_| bad("intention"))?),
        };
        let steps = tokens
            .map(|t| {
                let (s, a) = t.split_once(':').ok_or_else(|| bad("step"))?;
                Ok((
                    s.parse().map_err(|_| bad("state"))?,
                    a.parse().map_err(|_| bad("action"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        if steps.is_empty() {
            return Err(bad("length"));
        }
        demos.push(Trajectory {
            steps,
            true_intention,
        });
    }
    Ok(demos)
}
