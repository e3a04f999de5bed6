//! Maximum-entropy IRL quantities: state visitation frequencies, trajectory
//! log-likelihoods and the per-state weights of the M-step gradient.

use crate::envs::Trajectory;
use crate::error::{Error, Result};
use crate::mdp::{StochasticPolicy, TabularMdp};

/// Expected per-state visit counts over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SvfVector {
    pub visits: Vec<f64>,
}

impl SvfVector {
    pub fn total(&self) -> f64 {
        self.visits.iter().sum()
    }
}

/// Visit counts of a single demonstration.
pub fn trajectory_svf(traj: &Trajectory, n_states: usize) -> SvfVector {
    let mut visits = vec![0.0; n_states];
    for s in traj.states() {
        visits[s] += 1.0;
    }
    SvfVector { visits }
}

/// Expected visit counts of the first `horizon` states when following
/// `policy` from the MDP's start distribution.
pub fn expected_svf(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    horizon: usize,
) -> Result<SvfVector> {
    expected_svf_from(mdp, policy, mdp.start_distribution(), horizon)
}

/// [`expected_svf`] from an explicit initial state distribution.
pub fn expected_svf_from(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    start: &[f64],
    horizon: usize,
) -> Result<SvfVector> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let ns = mdp.n_states();
    if start.len() != ns {
        return Err(Error::DimensionMismatch {
            context: "start distribution",
            expected: ns,
            actual: start.len(),
        });
    }
    let mut current = start.to_vec();
    let mut visits = current.clone();
    let mut next = vec![0.0; ns];
    for _ in 1..horizon {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (s, &mass) in current.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &pa) in policy.action_probs(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for &(s2, p) in mdp.successors(s, a) {
                    next[s2] += mass * pa * p;
                }
            }
        }
        std::mem::swap(&mut current, &mut next);
        for (v, d) in visits.iter_mut().zip(&current) {
            *v += d;
        }
    }
    Ok(SvfVector { visits })
}

/// `Σ_t log π(a_t | s_t)`; `-inf` when the demonstration takes an action of
/// probability zero.
pub fn trajectory_loglik(policy: &StochasticPolicy, traj: &Trajectory) -> f64 {
    traj.steps.iter().map(|&(s, a)| policy.log_prob(s, a)).sum()
}

/// Per-intention state weights `γ_k (μ(τ) − E_k[μ])`.
///
/// Intentions with zero responsibility get an all-zero vector.
pub fn mstep_state_weights(
    gamma: &[f64],
    traj_svf: &SvfVector,
    expected_svfs: &[SvfVector],
) -> Result<Vec<Vec<f64>>> {
    if gamma.len() != expected_svfs.len() {
        return Err(Error::DimensionMismatch {
            context: "responsibilities vs expected SVFs",
            expected: expected_svfs.len(),
            actual: gamma.len(),
        });
    }
    let total: f64 = gamma.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "responsibilities sum to {total}"
        )));
    }
    let ns = traj_svf.visits.len();
    gamma
        .iter()
        .zip(expected_svfs)
        .map(|(&g, expected)| {
            if expected.visits.len() != ns {
                return Err(Error::DimensionMismatch {
                    context: "expected SVF",
                    expected: ns,
                    actual: expected.visits.len(),
                });
            }
            Ok(if g == 0.0 {
                vec![0.0; ns]
            } else {
                traj_svf
                    .visits
                    .iter()
                    .zip(&expected.visits)
                    .map(|(mu, e)| g * (mu - e))
                    .collect()
            })
        })
        .collect()
}
