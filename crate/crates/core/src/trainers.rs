//! The two adaptive training loops, stochastic EM (SEM) and Monte Carlo EM
//! (MCEM), plus the fixed-K ablation obtained with zero concentration.
//!
//! Each outer iteration solves the soft policies of all current heads, then
//! visits every demonstration in order, by default re-solving after every
//! visit. A visit removes the demonstration from its intention, spawns a
//! fresh candidate head for a new intention, reassigns the demonstration
//! (posterior sample for SEM, Metropolis-Hastings with a CRP-prior proposal
//! for MCEM) and takes one Adam step on the max-ent M-step gradient. The
//! candidate is kept only if the demonstration moves to it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, trace};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crp::{
    apply_assignment, crp_prior, estep_responsibilities, mh_accept, sstep_sample, CrpState, Target,
};
use crate::envs::Trajectory;
use crate::error::{Error, Result};
use crate::maxent::{
    expected_svf, expected_svf_from, mstep_state_weights, trajectory_loglik, trajectory_svf,
    SvfVector,
};
use crate::mdp::{
    soft_value_iteration_from, StochasticPolicy, TabularMdp, ValueVector, DEFAULT_TOLERANCE,
};
use crate::reward_model::{NetShape, RewardNet, DEFAULT_LEARNING_RATE};

/// Default weight of the reward penalty.
pub const DEFAULT_REWARD_L2: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Sem,
    Mcem,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Sem => "SEM",
            Algorithm::Mcem => "MCEM",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SEM" | "SEM-MIIRL" => Ok(Algorithm::Sem),
            "MCEM" | "MCEM-MIIRL" => Ok(Algorithm::Mcem),
            other => Err(Error::Parse(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Concentration of the CRP prior.
    pub alpha: f64,
    /// Initial number of intentions; demonstrations start round-robin.
    pub k_init: usize,
    /// Fixed-K ablation: zero concentration, `fixed_k` initial intentions, no births.
    pub fixed_k: Option<usize>,
    pub max_iter: usize,
    pub lr: f64,
    /// Weight of the `½‖R_k‖²` penalty on every updated head's state rewards.
    pub reward_l2: f64,
    pub vi_tolerance: f64,
    pub seed: u64,
    pub net: NetShape,
    pub svf_start: SvfStart,
    pub policy_refresh: PolicyRefresh,
}

/// When the soft policies of existing heads are re-solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyRefresh {
    /// Once at the start of every outer iteration.
    PerIteration,
    /// Additionally after every demonstration visit, so that likelihoods and
    /// expected SVFs always reflect the current parameters.
    PerVisit,
}

/// Initial distribution of the expected SVF in the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvfStart {
    /// The visited demonstration's first state.
    Demonstration,
    /// The MDP start distribution.
    Distribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sem,
            alpha: 1.0,
            k_init: 1,
            fixed_k: None,
            max_iter: 200,
            lr: DEFAULT_LEARNING_RATE,
            reward_l2: DEFAULT_REWARD_L2,
            vi_tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            net: NetShape::desk(),
            svf_start: SvfStart::Demonstration,
            policy_refresh: PolicyRefresh::PerVisit,
        }
    }
}

impl TrainConfig {
    /// Concentration actually used: zero in fixed-K mode.
    pub fn effective_alpha(&self) -> f64 {
        if self.fixed_k.is_some() {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn effective_k_init(&self) -> usize {
        self.fixed_k.unwrap_or(self.k_init)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.effective_k_init() == 0 {
            return Err(Error::InvalidArgument(
                "initial intention count must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.reward_l2 >= 0.0 && self.reward_l2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reward penalty must be >= 0, got {}",
                self.reward_l2
            )));
        }
        if !(self.vi_tolerance > 0.0) {
            return Err(Error::InvalidArgument(
                "value-iteration tolerance must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Scores produced by an evaluation callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub avg_evd: f64,
    pub transfer_avg_evd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub iteration: usize,
    pub k: usize,
    pub counts: Vec<usize>,
    /// Sum over demonstrations of their log-likelihood under their intention's
    /// policy, as solved at the start of the iteration.
    pub log_likelihood: f64,
    pub evaluation: Option<Evaluation>,
    /// Cumulative training time (evaluation excluded).
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: RewardNet,
    pub crp: CrpState,
    pub history: Vec<IterationRecord>,
    /// Evaluation of the untrained model.
    pub initial: Option<Evaluation>,
}

impl TrainResult {
    /// Equality of everything except wall-clock times.
    pub fn same_outcome(&self, other: &TrainResult) -> bool {
        let strip = |h: &[IterationRecord]| -> Vec<IterationRecord> {
            h.iter()
                .cloned()
                .map(|mut r| {
                    r.wall_ms = 0.0;
                    r
                })
                .collect()
        };
        self.net == other.net
            && self.crp == other.crp
            && self.initial == other.initial
            && strip(&self.history) == strip(&other.history)
    }

    /// Mean training time per completed iteration in milliseconds.
    pub fn mean_iteration_ms(&self) -> f64 {
        match self.history.last() {
            Some(last) => last.wall_ms / self.history.len() as f64,
            None => 0.0,
        }
    }
}

/// Final hard intention of every demonstration.
pub fn map_assignments(result: &TrainResult) -> Result<Vec<usize>> {
    result.crp.labels()
}

/// What a trainer learns from.
#[derive(Debug, Clone, Copy)]
pub struct TrainProblem<'a> {
    pub mdp: &'a TabularMdp,
    /// `n_states × feature_dim` state features.
    pub features: &'a Array2<f64>,
    pub demos: &'a [Trajectory],
    /// Starting intention of every demonstration; round-robin over the
    /// initial intention count when `None`.
    pub initial_assignment: Option<&'a [usize]>,
}

impl<'a> TrainProblem<'a> {
    pub fn new(mdp: &'a TabularMdp, features: &'a Array2<f64>, demos: &'a [Trajectory]) -> Self {
        Self {
            mdp,
            features,
            demos,
            initial_assignment: None,
        }
    }

    pub fn with_initial_assignment(self, labels: &'a [usize]) -> Self {
        Self {
            initial_assignment: Some(labels),
            ..self
        }
    }
}

/// Per-iteration evaluation hook.
pub type Evaluator<'e> = dyn FnMut(&RewardNet, &CrpState) -> Result<Evaluation> + 'e;

pub fn train_sem(
    problem: TrainProblem<'_>,
    config: &TrainConfig,
    evaluator: Option<&mut Evaluator<'_>>,
) -> Result<TrainResult> {
    let config = TrainConfig {
        algorithm: Algorithm::Sem,
        ..*config
    };
    Trainer::new(problem, config)?.run(evaluator)
}

pub fn train_mcem(
    problem: TrainProblem<'_>,
    config: &TrainConfig,
    evaluator: Option<&mut Evaluator<'_>>,
) -> Result<TrainResult> {
    let config = TrainConfig {
        algorithm: Algorithm::Mcem,
        ..*config
    };
    Trainer::new(problem, config)?.run(evaluator)
}

/// Dispatches on `config.algorithm`.
pub fn train(
    problem: TrainProblem<'_>,
    config: &TrainConfig,
    evaluator: Option<&mut Evaluator<'_>>,
) -> Result<TrainResult> {
    Trainer::new(problem, *config)?.run(evaluator)
}

/// Soft policy of one head with its lazily computed expected SVFs.
#[derive(Debug, Clone)]
struct HeadPolicy {
    policy: StochasticPolicy,
    values: ValueVector,
    svf_by_horizon: Vec<(SvfKey, SvfVector)>,
}

/// Expected SVFs are either from the MDP start distribution or from one state.
type SvfKey = (Option<usize>, usize);

impl HeadPolicy {
    fn expected_svf(&mut self, mdp: &TabularMdp, key: SvfKey) -> Result<&SvfVector> {
        let idx = match self.svf_by_horizon.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let svf = match key {
                    (None, horizon) => expected_svf(mdp, &self.policy, horizon)?,
                    (Some(s0), horizon) => {
                        let mut start = vec![0.0; mdp.n_states()];
                        start[s0] = 1.0;
                        expected_svf_from(mdp, &self.policy, &start, horizon)?
                    }
                };
                self.svf_by_horizon.push((key, svf));
                self.svf_by_horizon.len() - 1
            }
        };
        Ok(&self.svf_by_horizon[idx].1)
    }
}

/// The new-intention candidate of one visit: a freshly spawned head,
/// appended at index `head`.
struct Candidate {
    head: usize,
    policy: HeadPolicy,
}

struct Trainer<'a> {
    mdp: &'a TabularMdp,
    features: &'a Array2<f64>,
    demos: &'a [Trajectory],
    config: TrainConfig,
    alpha: f64,
    rng: ChaCha8Rng,
    net: RewardNet,
    crp: CrpState,
    traj_svfs: Vec<SvfVector>,
    heads: Vec<HeadPolicy>,
    candidate_warm: Option<ValueVector>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    fn new(problem: TrainProblem<'a>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let TrainProblem {
            mdp,
            features,
            demos,
            initial_assignment,
        } = problem;
        if demos.is_empty() {
            return Err(Error::InvalidArgument("no demonstrations".into()));
        }
        if features.nrows() != mdp.n_states() {
            return Err(Error::DimensionMismatch {
                context: "feature rows",
                expected: mdp.n_states(),
                actual: features.nrows(),
            });
        }
        for (m, d) in demos.iter().enumerate() {
            if d.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "demonstration {m} is empty"
                )));
            }
            if d.steps
                .iter()
                .any(|&(s, a)| s >= mdp.n_states() || a >= mdp.n_actions())
            {
                return Err(Error::InvalidArgument(format!(
                    "demonstration {m} has an out-of-range state or action"
                )));
            }
        }
        let alpha = config.effective_alpha();
        let crp = match initial_assignment {
            Some(labels) => {
                if labels.len() != demos.len() {
                    return Err(Error::DimensionMismatch {
                        context: "initial assignment",
                        expected: demos.len(),
                        actual: labels.len(),
                    });
                }
                CrpState::from_assignments(labels.to_vec(), alpha)?
            }
            None => CrpState::round_robin(
                demos.len(),
                config.effective_k_init().min(demos.len()),
                alpha,
            )?,
        };
        if let Some(k) = config.fixed_k {
            if crp.k() > k {
                return Err(Error::InvalidArgument(format!(
                    "initial assignment uses {} intentions, more than fixed K = {k}",
                    crp.k()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = RewardNet::new(features.ncols(), config.net, crp.k(), rng.gen())?;
        let traj_svfs = demos
            .iter()
            .map(|d| trajectory_svf(d, mdp.n_states()))
            .collect();
        Ok(Self {
            mdp,
            features,
            demos,
            config,
            alpha,
            rng,
            net,
            crp,
            traj_svfs,
            heads: Vec::new(),
            candidate_warm: None,
            iteration: 0,
        })
    }

    fn run(mut self, mut evaluator: Option<&mut Evaluator<'_>>) -> Result<TrainResult> {
        let initial = match evaluator.as_mut() {
            Some(eval) => Some(eval(&self.net, &self.crp)?),
            None => None,
        };
        let mut history = Vec::with_capacity(self.config.max_iter);
        let mut train_ms = 0.0;
        for iteration in 1..=self.config.max_iter {
            self.iteration = iteration;
            let started = Instant::now();
            self.solve_policies()?;
            let log_likelihood = self.total_log_likelihood();
            for m in 0..self.demos.len() {
                match self.config.algorithm {
                    Algorithm::Sem => self.sem_visit(m)?,
                    Algorithm::Mcem => self.mcem_visit(m)?,
                }
                if self.config.policy_refresh == PolicyRefresh::PerVisit {
                    self.solve_policies()?;
                }
                debug_assert_eq!(self.net.n_heads(), self.crp.k());
            }
            train_ms += started.elapsed().as_secs_f64() * 1e3;

            let evaluation = match evaluator.as_mut() {
                Some(eval) => Some(eval(&self.net, &self.crp)?),
                None => None,
            };
            debug!(
                "event=iteration algorithm={} iter={} k={} counts={:?} loglik={:.6} avg_evd={:?}",
                self.config.algorithm,
                iteration,
                self.crp.k(),
                self.crp.counts(),
                log_likelihood,
                evaluation.map(|e| e.avg_evd)
            );
            history.push(IterationRecord {
                iteration,
                k: self.crp.k(),
                counts: self.crp.counts().to_vec(),
                log_likelihood,
                evaluation,
                wall_ms: train_ms,
            });
        }
        Ok(TrainResult {
            net: self.net,
            crp: self.crp,
            history,
            initial,
        })
    }

    fn solve_policies(&mut self) -> Result<()> {
        let cache = self.net.base_forward(self.features)?;
        let mut heads = Vec::with_capacity(self.net.n_heads());
        for k in 0..self.net.n_heads() {
            let reward = self.net.head_forward(&cache, k)?;
            let warm = self.heads.get(k).map(|h| &h.values);
            let sol = soft_value_iteration_from(self.mdp, &reward, self.config.vi_tolerance, warm)?;
            heads.push(HeadPolicy {
                policy: sol.policy,
                values: sol.values,
                svf_by_horizon: Vec::new(),
            });
        }
        self.heads = heads;
        Ok(())
    }

    fn total_log_likelihood(&self) -> f64 {
        self.demos
            .iter()
            .zip(self.crp.assignments())
            .map(|(d, a)| trajectory_loglik(&self.heads[a.expect("all assigned")].policy, d))
            .sum()
    }

    fn current(&self, m: usize) -> usize {
        self.crp
            .assignment(m)
            .expect("every demonstration is assigned")
    }

    /// New-intention candidate for visiting demonstration `m`.
    fn candidate(&mut self) -> Result<Candidate> {
        let head = self.net.spawn_head(self.rng.gen());
        let reward = self.net.forward(self.features, head)?;
        let sol = soft_value_iteration_from(
            self.mdp,
            &reward,
            self.config.vi_tolerance,
            self.candidate_warm.as_ref(),
        )?;
        self.candidate_warm = Some(sol.values.clone());
        Ok(Candidate {
            head,
            policy: HeadPolicy {
                policy: sol.policy,
                values: sol.values,
                svf_by_horizon: Vec::new(),
            },
        })
    }

    fn policy_of<'b>(
        &'b self,
        head: usize,
        candidate: Option<&'b Candidate>,
    ) -> &'b StochasticPolicy {
        match candidate {
            Some(c) if c.head == head => &c.policy.policy,
            _ => &self.heads[head].policy,
        }
    }

    fn sem_visit(&mut self, m: usize) -> Result<()> {
        let prior = crp_prior(&self.crp, Some(m))?;
        let current = self.current(m);
        if prior.degenerate {
            return self.mstep(m, &[(current, 1.0)], None);
        }
        let mut candidate = self.candidate()?;
        let demo = &self.demos[m];
        let mut heads: Vec<usize> = prior.labels.clone();
        heads.push(candidate.head);
        let logliks: Vec<f64> = heads
            .iter()
            .map(|&h| trajectory_loglik(self.policy_of(h, Some(&candidate)), demo))
            .collect();
        let gamma = estep_responsibilities(&prior.counts, self.alpha, &logliks)?;
        let choice = sstep_sample(&gamma, &mut self.rng)?;
        trace!(
            "event=estep iter={} m={} k={} gamma={:?} sampled={}",
            self.iteration,
            m,
            self.crp.k(),
            gamma,
            choice
        );

        let terms: Vec<(usize, f64)> = heads.iter().copied().zip(gamma.iter().copied()).collect();
        self.mstep(m, &terms, Some(&mut candidate))?;

        let target = if choice < prior.labels.len() {
            Target::Existing(prior.labels[choice])
        } else {
            Target::New
        };
        self.commit(m, target, candidate)
    }

    fn mcem_visit(&mut self, m: usize) -> Result<()> {
        let prior = crp_prior(&self.crp, Some(m))?;
        let current = self.current(m);
        if prior.degenerate {
            return self.mstep(m, &[(current, 1.0)], None);
        }
        let proposal = sstep_sample(&prior.probs, &mut self.rng)?;
        let (proposed_head, mut candidate) = if proposal < prior.labels.len() {
            (prior.labels[proposal], None)
        } else {
            let c = self.candidate()?;
            (c.head, Some(c))
        };
        let demo = &self.demos[m];
        let current_ll = trajectory_loglik(&self.heads[current].policy, demo);
        let proposed_ll =
            trajectory_loglik(self.policy_of(proposed_head, candidate.as_ref()), demo);
        let accepted = mh_accept(current_ll, proposed_ll, &mut self.rng);
        trace!(
            "event=mh iter={} m={} k={} current={} proposed={} log_ratio={:.6} accepted={}",
            self.iteration,
            m,
            self.crp.k(),
            current,
            proposed_head,
            proposed_ll - current_ll,
            accepted
        );

        let (target, head) = match (accepted, &candidate) {
            (false, _) => (Target::Existing(current), current),
            (true, Some(c)) => (Target::New, c.head),
            (true, _) => (Target::Existing(proposed_head), proposed_head),
        };
        self.mstep(m, &[(head, 1.0)], candidate.as_mut())?;
        match candidate {
            Some(c) => self.commit(m, target, c),
            None => {
                let events = apply_assignment(&mut self.crp, m, target)?;
                self.apply_pruning(events.occupied())
            }
        }
    }

    /// One Adam step on `Σ_k γ_k (μ(τ) − E_k[μ])ᵀ ∂R_k/∂ψ` over `(head, γ_k)` terms.
    fn mstep(
        &mut self,
        m: usize,
        terms: &[(usize, f64)],
        candidate: Option<&mut Candidate>,
    ) -> Result<()> {
        let demo = &self.demos[m];
        let key = match self.config.svf_start {
            SvfStart::Demonstration => (Some(demo.steps[0].0), demo.len()),
            SvfStart::Distribution => (None, demo.len()),
        };
        let mut fresh = candidate.map(|c| (c.head, &mut c.policy));
        let mut gammas = Vec::new();
        let mut expected = Vec::new();
        let mut heads = Vec::new();
        for &(head, g) in terms {
            if g == 0.0 {
                continue;
            }
            let svf = match fresh.as_mut() {
                Some((h, policy)) if *h == head => policy.expected_svf(self.mdp, key)?.clone(),
                _ => self.heads[head].expected_svf(self.mdp, key)?.clone(),
            };
            heads.push(head);
            gammas.push(g);
            expected.push(svf);
        }
        // renormalize after dropping zero-mass terms
        let total: f64 = gammas.iter().sum();
        gammas.iter_mut().for_each(|g| *g /= total);
        let mut weights = mstep_state_weights(&gammas, &self.traj_svfs[m], &expected)?;
        let cache = self.net.base_forward(self.features)?;
        let reg = self.config.reward_l2;
        if reg > 0.0 {
            for ((w, &h), &g) in weights.iter_mut().zip(&heads).zip(&gammas) {
                let r = self.net.head_forward(&cache, h)?;
                for (x, rs) in w.iter_mut().zip(&r) {
                    *x -= reg * g * rs;
                }
            }
        }
        let grad_terms: Vec<(usize, &[f64])> = heads
            .iter()
            .zip(&weights)
            .map(|(&h, w)| (h, w.as_slice()))
            .collect();
        let grads = self.net.backward_cached(&cache, &grad_terms)?;
        self.net.adam_step(&grads, self.config.lr).map_err(|e| {
            Error::NonFinite(format!(
                "{e} (iteration {}, demonstration {m})",
                self.iteration
            ))
        })
    }

    /// Applies the assignment, keeping or discarding the candidate head.
    fn commit(&mut self, m: usize, target: Target, candidate: Candidate) -> Result<()> {
        if target == Target::New {
            self.heads.push(candidate.policy);
        } else {
            self.net.remove_head(candidate.head)?;
        }
        let events = apply_assignment(&mut self.crp, m, target)?;
        if let Some(born) = events.born {
            debug!(
                "event=birth iter={} m={} k={} head={}",
                self.iteration,
                m,
                self.crp.k(),
                born
            );
        }
        self.apply_pruning(events.occupied())
    }

    fn apply_pruning(&mut self, occupied: Option<Vec<usize>>) -> Result<()> {
        let Some(occupied) = occupied else {
            return Ok(());
        };
        self.net.prune_heads(&occupied)?;
        let mut k = 0;
        self.heads.retain(|_| {
            k += 1;
            occupied.contains(&(k - 1))
        });
        debug!(
            "event=prune iter={} k={} kept={:?}",
            self.iteration,
            self.crp.k(),
            occupied
        );
        if self.net.n_heads() != self.crp.k() || self.heads.len() != self.crp.k() {
            return Err(Error::InconsistentState(format!(
                "{} heads and {} policies for {} intentions",
                self.net.n_heads(),
                self.heads.len(),
                self.crp.k()
            )));
        }
        Ok(())
    }
}
