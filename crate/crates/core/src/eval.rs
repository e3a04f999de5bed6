//! Expected value difference (EVD) and the per-run evaluation built on it.

use std::collections::HashMap;

use crate::crp::CrpState;
use crate::envs::{intention_reward, BenchmarkEnv, Trajectory};
use crate::error::{Error, Result};
use crate::mdp::{optimal_policy, policy_evaluation};
use crate::reward_model::RewardNet;
use crate::trainers::{Evaluation, TrainResult};

/// Default solver tolerance for evaluation.
pub const EVAL_TOLERANCE: f64 = 1e-6;

/// Start-weighted value, under `true_reward`, of the optimal policy for `reward`.
fn value_under(
    env: &BenchmarkEnv,
    true_reward: &[f64],
    reward: &[f64],
    tolerance: f64,
) -> Result<f64> {
    let (policy, _) = optimal_policy(&env.mdp, reward, tolerance)?;
    let v = policy_evaluation(&env.mdp, &policy, true_reward, tolerance)?;
    Ok(v.weighted_by(env.mdp.start_distribution()))
}

/// `|V^{π*}_{R} − V^{π}_{R}|` weighted by the start distribution, where `R` is
/// the true reward of `true_intention`, `π*` is optimal for `R` and `π` is
/// optimal for `learned_reward`.
pub fn evd(
    env: &BenchmarkEnv,
    true_intention: usize,
    learned_reward: &[f64],
    tolerance: f64,
) -> Result<f64> {
    let truth = intention_reward(env, true_intention)?;
    if learned_reward.len() != env.n_states() {
        return Err(Error::DimensionMismatch {
            context: "learned reward",
            expected: env.n_states(),
            actual: learned_reward.len(),
        });
    }
    let expert = value_under(env, truth, truth, tolerance)?;
    let learned = value_under(env, truth, learned_reward, tolerance)?;
    Ok((expert - learned).abs())
}

/// Scores a learned model on one environment, caching expert values.
#[derive(Debug, Clone)]
pub struct EnvScorer<'a> {
    env: &'a BenchmarkEnv,
    tolerance: f64,
    expert_values: HashMap<usize, f64>,
}

impl<'a> EnvScorer<'a> {
    pub fn new(env: &'a BenchmarkEnv, tolerance: f64) -> Self {
        Self {
            env,
            tolerance,
            expert_values: HashMap::new(),
        }
    }

    fn expert_value(&mut self, intention: usize) -> Result<f64> {
        if let Some(&v) = self.expert_values.get(&intention) {
            return Ok(v);
        }
        let truth = intention_reward(self.env, intention)?;
        let v = value_under(self.env, truth, truth, self.tolerance)?;
        self.expert_values.insert(intention, v);
        Ok(v)
    }

    /// Mean over demonstrations of the EVD between each demonstration's true
    /// intention and the reward of its assigned head.
    pub fn avg_evd(
        &mut self,
        net: &RewardNet,
        assignments: &[usize],
        true_intentions: &[usize],
    ) -> Result<f64> {
        if assignments.len() != true_intentions.len() {
            return Err(Error::DimensionMismatch {
                context: "assignments vs demonstrations",
                expected: true_intentions.len(),
                actual: assignments.len(),
            });
        }
        if assignments.is_empty() {
            return Err(Error::InvalidArgument(
                "no demonstrations to evaluate".into(),
            ));
        }
        let cache = net.base_forward(&self.env.features)?;
        let mut rewards: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut pair_evd: HashMap<(usize, usize), f64> = HashMap::new();
        let mut total = 0.0;
        for (&k, &truth) in assignments.iter().zip(true_intentions) {
            let d = match pair_evd.get(&(k, truth)) {
                Some(&d) => d,
                None => {
                    if let std::collections::hash_map::Entry::Vacant(e) = rewards.entry(k) {
                        e.insert(net.head_forward(&cache, k)?);
                    }
                    let true_reward = intention_reward(self.env, truth)?;
                    let learned = value_under(self.env, true_reward, &rewards[&k], self.tolerance)?;
                    let d = (self.expert_value(truth)? - learned).abs();
                    pair_evd.insert((k, truth), d);
                    d
                }
            };
            total += d;
        }
        Ok(total / assignments.len() as f64)
    }
}

/// Per-iteration evaluator: average EVD on the training environment and,
/// optionally, on a transferred environment with the same heads.
#[derive(Debug, Clone)]
pub struct RunEvaluator<'a> {
    train: EnvScorer<'a>,
    transfer: Option<EnvScorer<'a>>,
    true_intentions: Vec<usize>,
}

impl<'a> RunEvaluator<'a> {
    pub fn new(
        env: &'a BenchmarkEnv,
        transferred: Option<&'a BenchmarkEnv>,
        demos: &[Trajectory],
        tolerance: f64,
    ) -> Result<Self> {
        let true_intentions = demos
            .iter()
            .enumerate()
            .map(|(m, d)| {
                d.true_intention.ok_or_else(|| {
                    Error::InvalidArgument(format!("demonstration {m} has no true intention"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = transferred {
            if t.feature_dim() != env.feature_dim() {
                return Err(Error::DimensionMismatch {
                    context: "transferred environment features",
                    expected: env.feature_dim(),
                    actual: t.feature_dim(),
                });
            }
        }
        Ok(Self {
            train: EnvScorer::new(env, tolerance),
            transfer: transferred.map(|t| EnvScorer::new(t, tolerance)),
            true_intentions,
        })
    }

    pub fn evaluate(&mut self, net: &RewardNet, crp: &CrpState) -> Result<Evaluation> {
        let assignments = crp.labels()?;
        let avg_evd = self
            .train
            .avg_evd(net, &assignments, &self.true_intentions)?;
        let transfer_avg_evd = match self.transfer.as_mut() {
            Some(t) => Some(t.avg_evd(net, &assignments, &self.true_intentions)?),
            None => None,
        };
        Ok(Evaluation {
            avg_evd,
            transfer_avg_evd,
        })
    }
}

/// Final scores of a trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunScore {
    pub avg_evd: f64,
    pub transfer_avg_evd: Option<f64>,
    pub k_predicted: usize,
}

pub fn evaluate_run(
    env: &BenchmarkEnv,
    transferred: Option<&BenchmarkEnv>,
    result: &TrainResult,
    demos: &[Trajectory],
    tolerance: f64,
) -> Result<RunScore> {
    let mut evaluator = RunEvaluator::new(env, transferred, demos, tolerance)?;
    let e = evaluator.evaluate(&result.net, &result.crp)?;
    Ok(RunScore {
        avg_evd: e.avg_evd,
        transfer_avg_evd: e.transfer_avg_evd,
        k_predicted: result.crp.k(),
    })
}

/// Fraction of demonstrations whose predicted intention matches the truth
/// under the best one-to-one relabelling of predicted intentions.
pub fn clustering_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "clustering labels",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(1.0);
    }
    let relabel = |labels: &[usize]| -> (Vec<usize>, usize) {
        let mut seen: Vec<usize> = Vec::new();
        let out = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(i) => i,
                None => {
                    seen.push(*l);
                    seen.len() - 1
                }
            })
            .collect();
        (out, seen.len())
    };
    let (p, kp) = relabel(predicted);
    let (t, kt) = relabel(truth);
    let mut confusion = vec![vec![0usize; kt]; kp];
    for (&a, &b) in p.iter().zip(&t) {
        confusion[a][b] += 1;
    }
    // Assign each true label to a distinct predicted label (or none); pad the
    // smaller side so a plain permutation search covers partial matchings.
    let n = kp.max(kt);
    let cell = |i: usize, j: usize| if i < kp && j < kt { confusion[i][j] } else { 0 };
    let best = permutations(n)
        .map(|perm| (0..n).map(|j| cell(perm[j], j)).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / predicted.len() as f64)
}

fn permutations(n: usize) -> impl Iterator<Item = Vec<usize>> {
    use itertools::Itertools;
    (0..n).permutations(n)
}
