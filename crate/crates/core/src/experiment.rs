//! Multi-seed experiment runner, its plain-text configuration and summaries.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envs::{
    parse_intentions, sample_mixture_demonstrations, BenchmarkEnv, EnvKind, EnvParams,
};
use crate::error::{Error, Result};
use crate::eval::{clustering_accuracy, RunEvaluator, EVAL_TOLERANCE};
use crate::output::round_sig;
use crate::reward_model::{NetShape, RewardNet};
use crate::trainers::{
    train, Algorithm, Evaluation, PolicyRefresh, SvfStart, TrainConfig, TrainProblem,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvParams,
    /// Ground-truth intentions demonstrated, indices into the intention table
    /// (or GridWorld reward indices).
    pub intentions: Vec<usize>,
    pub demos_per_intention: usize,
    pub demo_length: usize,
    /// Template for every configuration point; `alpha` and `algorithm` are
    /// overridden by the sweep lists.
    pub train: TrainConfig,
    pub algorithms: Vec<Algorithm>,
    pub alphas: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub eval_tolerance: f64,
    /// Record training wall time in `runs.csv`; off keeps the file reproducible.
    pub record_wall_time: bool,
    pub images: bool,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind`.
    pub fn new(kind: EnvKind) -> Self {
        Self {
            env: EnvParams::desk_scale(kind),
            intentions: vec![0, 1, 2],
            demos_per_intention: 16,
            demo_length: kind.default_demo_length(),
            train: TrainConfig::default(),
            algorithms: vec![Algorithm::Sem],
            alphas: vec![1.0],
            repeats: 6,
            seed: 0,
            eval_tolerance: EVAL_TOLERANCE,
            record_wall_time: false,
            images: false,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be >= 1".into()));
        }
        if self.demos_per_intention == 0 || self.demo_length == 0 {
            return Err(Error::InvalidArgument(
                "demos per intention and demo length must be >= 1".into(),
            ));
        }
        if self.intentions.is_empty() {
            return Err(Error::InvalidArgument("no intentions".into()));
        }
        let available = self.env.kind.n_intentions();
        if let Some(&bad) = self.intentions.iter().find(|&&i| i >= available) {
            return Err(Error::InvalidArgument(format!(
                "intention {bad} out of range for {} ({available} available)",
                self.env.kind
            )));
        }
        if self.algorithms.is_empty() || self.alphas.is_empty() {
            return Err(Error::InvalidArgument(
                "empty algorithm or alpha list".into(),
            ));
        }
        for &alpha in &self.alphas {
            TrainConfig {
                alpha,
                ..self.train
            }
            .validate()?;
        }
        Ok(())
    }

    /// One training configuration per (algorithm, alpha) pair.
    pub fn points(&self) -> Vec<TrainConfig> {
        let mut points = Vec::new();
        for &algorithm in &self.algorithms {
            for &alpha in &self.alphas {
                points.push(TrainConfig {
                    algorithm,
                    alpha,
                    ..self.train
                });
            }
        }
        points
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Parse(format!("invalid value '{value}' for {what}"));
        match key.trim() {
            "env" => {
                let kind: EnvKind = value.parse()?;
                self.env = EnvParams::desk_scale(kind);
                self.demo_length = kind.default_demo_length();
            }
            "paper_scale" => {
                if parse_bool(value)? {
                    self.env = EnvParams::paper_scale(self.env.kind);
                } else {
                    self.env = EnvParams::desk_scale(self.env.kind);
                }
            }
            "size" => self.env.size = parse(value, "size")?,
            "n_objects" => self.env.n_objects = parse(value, "n_objects")?,
            "n_colors" => self.env.n_colors = parse(value, "n_colors")?,
            "intentions" => self.intentions = parse_intentions(value)?,
            "demos_per_intention" => self.demos_per_intention = parse(value, key)?,
            "demo_length" => self.demo_length = parse(value, key)?,
            "algorithm" | "algorithms" => {
                self.algorithms = split_list(value)
                    .map(Algorithm::from_str)
                    .collect::<Result<_>>()?;
            }
            "alpha" | "alphas" => {
                self.alphas = split_list(value)
                    .map(|v| v.parse::<f64>().map_err(|_| bad("alpha")))
                    .collect::<Result<_>>()?;
                if let Some(&a) = self.alphas.first() {
                    self.train.alpha = a;
                }
            }
            "k_init" => self.train.k_init = parse(value, key)?,
            "fixed_k" => {
                self.train.fixed_k = match value {
                    "none" | "" => None,
                    v => Some(parse(v, key)?),
                }
            }
            "max_iter" => self.train.max_iter = parse(value, key)?,
            "lr" => self.train.lr = parse(value, key)?,
            "reward_l2" => self.train.reward_l2 = parse(value, key)?,
            "vi_tolerance" => self.train.vi_tolerance = parse(value, key)?,
            "svf_start" => {
                self.train.svf_start = match value {
                    "demonstration" => SvfStart::Demonstration,
                    "distribution" => SvfStart::Distribution,
                    _ => return Err(bad(key)),
                }
            }
            "policy_refresh" => {
                self.train.policy_refresh = match value {
                    "visit" => PolicyRefresh::PerVisit,
                    "iteration" => PolicyRefresh::PerIteration,
                    _ => return Err(bad(key)),
                }
            }
            "hidden_layers" => self.train.net.hidden_layers = parse(value, key)?,
            "hidden_width" => self.train.net.hidden_width = parse(value, key)?,
            "reward_feature_dim" => self.train.net.reward_feature_dim = parse(value, key)?,
            "head_bias" => self.train.net.head_bias = parse_bool(value)?,
            "net" => {
                self.train.net = match value {
                    "desk" => NetShape::desk(),
                    "paper" => NetShape::paper(),
                    _ => return Err(bad(key)),
                }
            }
            "repeats" => self.repeats = parse(value, key)?,
            "seed" => self.seed = parse(value, key)?,
            "eval_tolerance" => self.eval_tolerance = parse(value, key)?,
            "record_wall_time" => self.record_wall_time = parse_bool(value)?,
            "images" => self.images = parse_bool(value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Parse(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Reads a configuration document on top of the defaults of its `env` key
    /// (GridWorld when absent).
    pub fn from_text(text: &str) -> Result<Self> {
        let kind = text
            .lines()
            .filter_map(|l| l.split('#').next())
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "env")
            .map(|(_, v)| v.trim().parse::<EnvKind>())
            .transpose()?
            .unwrap_or(EnvKind::GridWorld);
        let mut config = Self::new(kind);
        config.apply_text(text)?;
        Ok(config)
    }

    /// The fully resolved configuration in the format read by [`Self::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[String]| v.join(",");
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("env", self.env.kind.name().to_string());
        kv("size", self.env.size.to_string());
        kv("n_objects", self.env.n_objects.to_string());
        kv("n_colors", self.env.n_colors.to_string());
        kv(
            "intentions",
            list(
                &self
                    .intentions
                    .iter()
                    .map(|i| intention_label(self.env.kind, *i))
                    .collect::<Vec<_>>(),
            ),
        );
        kv("demos_per_intention", self.demos_per_intention.to_string());
        kv("demo_length", self.demo_length.to_string());
        kv(
            "algorithms",
            list(
                &self
                    .algorithms
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>(),
            ),
        );
        kv(
            "alphas",
            list(
                &self
                    .alphas
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>(),
            ),
        );
        kv("k_init", t.k_init.to_string());
        kv(
            "fixed_k",
            t.fixed_k.map_or("none".into(), |k| k.to_string()),
        );
        kv("max_iter", t.max_iter.to_string());
        kv("lr", t.lr.to_string());
        kv("reward_l2", t.reward_l2.to_string());
        kv("vi_tolerance", t.vi_tolerance.to_string());
        kv(
            "svf_start",
            match t.svf_start {
                SvfStart::Demonstration => "demonstration",
                SvfStart::Distribution => "distribution",
            }
            .into(),
        );
        kv(
            "policy_refresh",
            match t.policy_refresh {
                PolicyRefresh::PerVisit => "visit",
                PolicyRefresh::PerIteration => "iteration",
            }
            .into(),
        );
        kv("hidden_layers", t.net.hidden_layers.to_string());
        kv("hidden_width", t.net.hidden_width.to_string());
        kv("reward_feature_dim", t.net.reward_feature_dim.to_string());
        kv("head_bias", t.net.head_bias.to_string());
        kv("repeats", self.repeats.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_tolerance", self.eval_tolerance.to_string());
        kv("record_wall_time", self.record_wall_time.to_string());
        kv("images", self.images.to_string());
        if let Some(dir) = &self.out_dir {
            kv("out_dir", dir.display().to_string());
        }
        out
    }
}

fn intention_label(kind: EnvKind, i: usize) -> String {
    match kind {
        EnvKind::GridWorld => i.to_string(),
        _ => crate::envs::INTENTION_NAMES[i].to_string(),
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse<T: FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value '{value}' for {what}")))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::Parse(format!("invalid boolean '{other}'"))),
    }
}

/// Seeds of one repeat, all derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepeatSeeds {
    /// Identifies the repeat in `runs.csv`.
    pub repeat: u64,
    pub env: u64,
    pub transfer: u64,
    pub demos: u64,
    pub train: u64,
}

pub fn repeat_seeds(seed: u64, repeats: usize) -> Vec<RepeatSeeds> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..repeats)
        .map(|_| {
            let repeat: u64 = rng.gen();
            let mut sub = ChaCha8Rng::seed_from_u64(repeat);
            RepeatSeeds {
                repeat,
                env: sub.gen(),
                transfer: sub.gen(),
                demos: sub.gen(),
                train: sub.gen(),
            }
        })
        .collect()
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: String,
    pub env: String,
    pub iteration: usize,
    pub avg_evd: f64,
    pub transfer_avg_evd: Option<f64>,
    pub k_predicted: usize,
    pub wall_ms: f64,
}

/// Final state of one repeat at one configuration point.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub point: usize,
    pub repeat: usize,
    pub run_id: String,
    pub seeds: RepeatSeeds,
    pub result: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub initial: Evaluation,
    pub final_eval: Evaluation,
    pub k_predicted: usize,
    pub assignments: Vec<usize>,
    pub true_intentions: Vec<usize>,
    pub accuracy: f64,
    pub mean_iteration_ms: f64,
    pub net: RewardNet,
}

/// Mean and standard error of one summary column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over `√n`; zero when `n = 1`.
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, se })
    }
}

/// Per-configuration-point aggregate of the final iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub point: usize,
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub alpha: f64,
    pub fixed_k: Option<usize>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub avg_evd: Option<Stat>,
    pub transfer_avg_evd: Option<Stat>,
    pub k_predicted: Option<Stat>,
    pub accuracy: Option<Stat>,
    pub iteration_ms: Option<Stat>,
    /// Fewer than two successful repeats: standard errors are not informative.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    pub outcomes: Vec<RunOutcome>,
    pub summaries: Vec<SummaryRow>,
}

impl ExperimentOutput {
    pub fn all_succeeded(&self) -> bool {
        self.outcomes.iter().all(|o| o.result.is_ok())
    }

    pub fn outcomes_for(&self, point: usize) -> impl Iterator<Item = &RunOutcome> {
        self.outcomes.iter().filter(move |o| o.point == point)
    }
}

struct RunJob {
    point: usize,
    repeat: usize,
    seeds: RepeatSeeds,
    train: TrainConfig,
}

/// Runs every configuration point on every repeat. Repeats run in parallel;
/// records are sorted by (point, repeat, iteration) so the output does not
/// depend on scheduling. A failing repeat is logged, kept in `outcomes` and
/// excluded from the summaries.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let seeds = repeat_seeds(config.seed, config.repeats);
    let jobs: Vec<RunJob> = config
        .points()
        .into_iter()
        .enumerate()
        .flat_map(|(point, train)| {
            seeds.iter().enumerate().map(move |(repeat, &s)| RunJob {
                point,
                repeat,
                seeds: s,
                train: TrainConfig {
                    seed: s.train,
                    ..train
                },
            })
        })
        .collect();

    let mut finished: Vec<(RunOutcome, Vec<RunRecord>)> = jobs
        .par_iter()
        .map(|job| {
            let run_id = format!("p{}-r{}", job.point, job.repeat);
            let started = Instant::now();
            let (result, records) = match run_one(config, job, &run_id) {
                Ok((summary, records)) => (Ok(summary), records),
                Err(e) => {
                    warn!("event=run_failed run_id={run_id} error=\"{e}\"");
                    (Err(e.to_string()), Vec::new())
                }
            };
            info!(
                "event=run_done run_id={run_id} ok={} seconds={:.1}",
                result.is_ok(),
                started.elapsed().as_secs_f64()
            );
            let outcome = RunOutcome {
                point: job.point,
                repeat: job.repeat,
                run_id,
                seeds: job.seeds,
                result,
            };
            (outcome, records)
        })
        .collect();
    finished.sort_by_key(|(o, _)| (o.point, o.repeat));

    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for (o, r) in finished {
        records.extend(r);
        outcomes.push(o);
    }
    let summaries = summarize(config, &records, &outcomes);
    Ok(ExperimentOutput {
        config: config.clone(),
        records,
        outcomes,
        summaries,
    })
}

fn run_one(
    config: &ExperimentConfig,
    job: &RunJob,
    run_id: &str,
) -> Result<(RunSummary, Vec<RunRecord>)> {
    let env = BenchmarkEnv::generate(config.env, job.seeds.env)?;
    let transferred = BenchmarkEnv::generate(config.env, job.seeds.transfer)?;
    let demos = sample_mixture_demonstrations(
        &env,
        &config.intentions,
        config.demos_per_intention,
        config.demo_length,
        job.seeds.demos,
    )?;
    let true_intentions: Vec<usize> = demos.iter().filter_map(|d| d.true_intention).collect();
    let mut evaluator = RunEvaluator::new(&env, Some(&transferred), &demos, config.eval_tolerance)?;
    let mut callback = |net: &RewardNet, crp: &crate::crp::CrpState| evaluator.evaluate(net, crp);
    let problem = TrainProblem::new(&env.mdp, &env.features, &demos);
    let result = train(problem, &job.train, Some(&mut callback))?;

    let algorithm = job.train.algorithm.to_string();
    let records = result
        .history
        .iter()
        .map(|h| {
            let e = h.evaluation.expect("evaluator supplied");
            RunRecord {
                run_id: run_id.to_string(),
                seed: job.seeds.repeat,
                algorithm: algorithm.clone(),
                env: config.env.kind.name().to_string(),
                iteration: h.iteration,
                avg_evd: round_sig(e.avg_evd),
                transfer_avg_evd: e.transfer_avg_evd.map(round_sig),
                k_predicted: h.k,
                wall_ms: if config.record_wall_time {
                    round_sig(h.wall_ms)
                } else {
                    0.0
                },
            }
        })
        .collect();
    let assignments = result.crp.labels()?;
    let final_eval = result
        .history
        .last()
        .and_then(|h| h.evaluation)
        .or(result.initial)
        .ok_or_else(|| Error::InvalidArgument("no evaluation recorded".into()))?;
    let summary = RunSummary {
        initial: result.initial.expect("evaluator supplied"),
        final_eval,
        k_predicted: result.crp.k(),
        accuracy: clustering_accuracy(&assignments, &true_intentions)?,
        assignments,
        true_intentions,
        mean_iteration_ms: result.mean_iteration_ms(),
        net: result.net,
    };
    Ok((summary, records))
}

/// Aggregates the final iteration of every successful repeat per point.
pub fn summarize(
    config: &ExperimentConfig,
    records: &[RunRecord],
    outcomes: &[RunOutcome],
) -> Vec<SummaryRow> {
    config
        .points()
        .iter()
        .enumerate()
        .map(|(point, train)| {
            let ok: Vec<&RunOutcome> = outcomes
                .iter()
                .filter(|o| o.point == point && o.result.is_ok())
                .collect();
            let n_failed = outcomes
                .iter()
                .filter(|o| o.point == point && o.result.is_err())
                .count();
            let finals: Vec<&RunRecord> = ok
                .iter()
                .filter_map(|o| {
                    records
                        .iter()
                        .filter(|r| r.run_id == o.run_id)
                        .max_by_key(|r| r.iteration)
                })
                .collect();
            let col = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Option<Stat> {
                let v: Option<Vec<f64>> = finals.iter().map(|r| f(r)).collect();
                v.and_then(|v| Stat::of(&v))
            };
            let summaries: Vec<&RunSummary> =
                ok.iter().filter_map(|o| o.result.as_ref().ok()).collect();
            SummaryRow {
                point,
                algorithm: train.algorithm,
                env: config.env.kind,
                alpha: train.effective_alpha(),
                fixed_k: train.fixed_k,
                n_ok: ok.len(),
                n_failed,
                avg_evd: col(&|r| Some(r.avg_evd)),
                transfer_avg_evd: col(&|r| r.transfer_avg_evd),
                k_predicted: col(&|r| Some(r.k_predicted as f64)),
                accuracy: Stat::of(&summaries.iter().map(|s| s.accuracy).collect::<Vec<_>>()),
                iteration_ms: if config.record_wall_time {
                    Stat::of(
                        &summaries
                            .iter()
                            .map(|s| s.mean_iteration_ms)
                            .collect::<Vec<_>>(),
                    )
                } else {
                    None
                },
                degenerate: ok.len() < 2,
            }
        })
        .collect()
}
