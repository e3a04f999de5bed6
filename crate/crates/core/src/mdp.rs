//! Tabular MDPs and the dynamic-programming solvers built on them.
//!
//! Rewards are per-state. Three solvers are provided:
//!
//! * [`soft_value_iteration`]: the stationary maximum-entropy policy
//!   `π(a|s) = exp(Q(s,a) − V(s))` with `V(s) = log Σ_a exp Q(s,a)`.
//! * [`optimal_policy`]: ordinary value iteration with a greedy,
//!   lowest-index tie-breaking policy.
//! * [`policy_evaluation`]: the value of a fixed policy.
//!
//! Transitions are stored sparsely (successor lists per state-action pair);
//! the grid benchmarks have at most five successors per pair.

use crate::error::{Error, Result};

pub const DEFAULT_DISCOUNT: f64 = 0.9;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const MAX_ITERATIONS: usize = 10_000;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Successor lists indexed by `s * n_actions + a`.
    successors: Vec<Vec<(usize, f64)>>,
    discount: f64,
    start: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from sparse successor lists, indexed by `s * n_actions + a`.
    /// Duplicate successors within a row are merged.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        successors: Vec<Vec<(usize, f64)>>,
        discount: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp(
                "state and action counts must be positive".into(),
            ));
        }
        if successors.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                context: "transition rows",
                expected: n_states * n_actions,
                actual: successors.len(),
            });
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!(
                "discount {discount} outside [0, 1)"
            )));
        }
        if start.len() != n_states {
            return Err(Error::DimensionMismatch {
                context: "start distribution",
                expected: n_states,
                actual: start.len(),
            });
        }
        check_distribution(&start, "start distribution")?;

        let mut merged = Vec::with_capacity(successors.len());
        for (row_idx, row) in successors.into_iter().enumerate() {
            let mut row: Vec<(usize, f64)> = row.into_iter().filter(|&(_, p)| p != 0.0).collect();
            row.sort_by_key(|&(next, _)| next);
            let mut compact: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (next, p) in row {
                if next >= n_states {
                    return Err(Error::InvalidMdp(format!(
                        "row {row_idx} references state {next} >= {n_states}"
                    )));
                }
                match compact.last_mut() {
                    Some(last) if last.0 == next => last.1 += p,
                    _ => compact.push((next, p)),
                }
            }
            let probs: Vec<f64> = compact.iter().map(|&(_, p)| p).collect();
            check_distribution(
                &probs,
                &format!(
                    "transition row (s={}, a={})",
                    row_idx / n_actions,
                    row_idx % n_actions
                ),
            )?;
            merged.push(compact);
        }

        Ok(Self {
            n_states,
            n_actions,
            successors: merged,
            discount,
            start,
        })
    }

    /// Builds an MDP from a dense `[s][a][s']` tensor in row-major order.
    pub fn from_dense(
        n_states: usize,
        n_actions: usize,
        transitions: &[f64],
        discount: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch {
                context: "dense transition tensor",
                expected: n_states * n_actions * n_states,
                actual: transitions.len(),
            });
        }
        let rows = transitions
            .chunks(n_states)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(next, &p)| (next, p))
                    .collect()
            })
            .collect();
        Self::new(n_states, n_actions, rows, discount, start)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start_distribution(&self) -> &[f64] {
        &self.start
    }

    pub fn successors(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.successors[state * self.n_actions + action]
    }

    pub fn transition_prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.successors(state, action)
            .iter()
            .find(|&&(s, _)| s == next)
            .map_or(0.0, |&(_, p)| p)
    }

    /// Copy of this MDP with another discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!(
                "discount {discount} outside [0, 1)"
            )));
        }
        Ok(Self {
            discount,
            ..self.clone()
        })
    }

    /// Copy of this MDP with another start distribution.
    pub fn with_start(&self, start: Vec<f64>) -> Result<Self> {
        if start.len() != self.n_states {
            return Err(Error::DimensionMismatch {
                context: "start distribution",
                expected: self.n_states,
                actual: start.len(),
            });
        }
        check_distribution(&start, "start distribution")?;
        Ok(Self {
            start,
            ..self.clone()
        })
    }

    #[inline]
    fn expected_next(&self, values: &[f64], state: usize, action: usize) -> f64 {
        self.successors(state, action)
            .iter()
            .map(|&(next, p)| p * values[next])
            .sum()
    }

    #[inline]
    fn q_value(&self, reward: &[f64], values: &[f64], state: usize, action: usize) -> f64 {
        reward[state] + self.discount * self.expected_next(values, state, action)
    }

    fn check_reward(&self, reward: &[f64]) -> Result<()> {
        if reward.len() != self.n_states {
            return Err(Error::DimensionMismatch {
                context: "reward vector",
                expected: self.n_states,
                actual: reward.len(),
            });
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward vector".into()));
        }
        Ok(())
    }
}

fn check_distribution(probs: &[f64], what: &str) -> Result<()> {
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidMdp(format!(
            "{what} has an entry outside [0, 1]"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidMdp(format!("{what} sums to {total}")));
    }
    Ok(())
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if tolerance > 0.0 && tolerance.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tolerance}"
        )))
    }
}

/// Residual threshold that bounds the distance to the fixed point by `tolerance`
/// for a `discount`-contraction.
fn fixed_point_threshold(tolerance: f64, discount: f64) -> f64 {
    if discount == 0.0 {
        f64::INFINITY
    } else {
        tolerance * (1.0 - discount) / discount
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Per-state values (discounted reward sums).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector(pub Vec<f64>);

impl ValueVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Expectation of the values under a state distribution.
    pub fn weighted_by(&self, distribution: &[f64]) -> f64 {
        self.0.iter().zip(distribution).map(|(v, p)| v * p).sum()
    }
}

/// Anything that assigns action probabilities to states.
pub trait Policy {
    fn n_states(&self) -> usize;

    /// Calls `f(action, probability)` for every action with nonzero probability.
    fn for_each_action<F: FnMut(usize, f64)>(&self, state: usize, f: F);
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
    /// Exact log-probabilities when known; they stay finite where `probs` underflows.
    log_probs: Option<Vec<f64>>,
}

impl StochasticPolicy {
    /// Builds a policy from a row-major `[s][a]` probability table.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                context: "policy table",
                expected: n_states * n_actions,
                actual: probs.len(),
            });
        }
        for row in probs.chunks(n_actions) {
            check_distribution(row, "policy row")?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
            log_probs: None,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            log_probs: None,
        }
    }

    pub fn from_deterministic(policy: &DeterministicPolicy, n_actions: usize) -> Self {
        let mut probs = vec![0.0; policy.actions.len() * n_actions];
        for (s, &a) in policy.actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: policy.actions.len(),
            n_actions,
            probs,
            log_probs: None,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        let idx = state * self.n_actions + action;
        match &self.log_probs {
            Some(l) => l[idx],
            None => self.probs[idx].ln(),
        }
    }

    pub fn action_probs(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }
}

impl Policy for StochasticPolicy {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn for_each_action<F: FnMut(usize, f64)>(&self, state: usize, mut f: F) {
        for (a, &p) in self.action_probs(state).iter().enumerate() {
            if p != 0.0 {
                f(a, p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    pub actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn action(&self, state: usize) -> usize {
        self.actions[state]
    }
}

impl Policy for DeterministicPolicy {
    fn n_states(&self) -> usize {
        self.actions.len()
    }

    fn for_each_action<F: FnMut(usize, f64)>(&self, state: usize, mut f: F) {
        f(self.actions[state], 1.0);
    }
}

/// Result of a soft value iteration run.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub policy: StochasticPolicy,
    pub values: ValueVector,
    pub iterations: usize,
}

/// Stationary maximum-entropy policy for a per-state reward.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    reward: &[f64],
    tolerance: f64,
) -> Result<StochasticPolicy> {
    soft_value_iteration_from(mdp, reward, tolerance, None).map(|sol| sol.policy)
}

/// Soft value iteration started from `warm_start` (zeros when `None`).
///
/// Stops once the max-norm change of `V` between sweeps is at most `tolerance`.
pub fn soft_value_iteration_from(
    mdp: &TabularMdp,
    reward: &[f64],
    tolerance: f64,
    warm_start: Option<&ValueVector>,
) -> Result<SoftSolution> {
    check_tolerance(tolerance)?;
    mdp.check_reward(reward)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut values = match warm_start {
        Some(v) if v.0.len() == ns => v.0.clone(),
        Some(v) => {
            return Err(Error::DimensionMismatch {
                context: "warm-start values",
                expected: ns,
                actual: v.0.len(),
            })
        }
        None => vec![0.0; ns],
    };
    let mut next = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;

    for iteration in 1..=MAX_ITERATIONS {
        for s in 0..ns {
            let row = &mut q[s * na..(s + 1) * na];
            for (a, qa) in row.iter_mut().enumerate() {
                *qa = mdp.q_value(reward, &values, s, a);
            }
            next[s] = log_sum_exp(row);
        }
        residual = max_abs_diff(&next, &values);
        std::mem::swap(&mut values, &mut next);
        if !residual.is_finite() {
            break;
        }
        if residual <= tolerance {
            let mut log_probs = q;
            for s in 0..ns {
                for p in &mut log_probs[s * na..(s + 1) * na] {
                    *p -= values[s];
                }
            }
            let probs = log_probs.iter().map(|l| l.exp()).collect();
            return Ok(SoftSolution {
                policy: StochasticPolicy {
                    n_states: ns,
                    n_actions: na,
                    probs,
                    log_probs: Some(log_probs),
                },
                values: ValueVector(values),
                iterations: iteration,
            });
        }
    }
    Err(Error::Divergence {
        solver: "soft value iteration",
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Time-indexed maximum-entropy policies for an undiscounted episode of
/// `horizon` steps; entry `t` is the policy used at step `t`.
///
/// With deterministic transitions the product of the policy factors along an
/// action sequence equals `exp(R(τ)) / Z(s₀)`, where `R(τ)` sums the rewards
/// of the `horizon` visited states.
pub fn soft_value_iteration_finite(
    mdp: &TabularMdp,
    reward: &[f64],
    horizon: usize,
) -> Result<Vec<StochasticPolicy>> {
    mdp.check_reward(reward)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut values = vec![0.0; ns];
    let mut policies = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut q = vec![0.0; ns * na];
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            let row = &mut q[s * na..(s + 1) * na];
            for (a, qa) in row.iter_mut().enumerate() {
                *qa = reward[s] + mdp.expected_next(&values, s, a);
            }
            next[s] = log_sum_exp(row);
            for qa in row.iter_mut() {
                *qa = (*qa - next[s]).exp();
            }
        }
        policies.push(StochasticPolicy {
            n_states: ns,
            n_actions: na,
            probs: q,
            log_probs: None,
        });
        values = next;
    }
    policies.reverse();
    Ok(policies)
}

/// Greedy policy under the optimal values, ties broken by the lowest action index.
///
/// `tolerance` bounds the max-norm distance of the returned values to `V*`.
pub fn optimal_policy(
    mdp: &TabularMdp,
    reward: &[f64],
    tolerance: f64,
) -> Result<(DeterministicPolicy, ValueVector)> {
    check_tolerance(tolerance)?;
    mdp.check_reward(reward)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let threshold = fixed_point_threshold(tolerance, mdp.discount);
    let mut values = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    let mut residual = f64::INFINITY;

    for _ in 0..MAX_ITERATIONS {
        for (s, v) in next.iter_mut().enumerate() {
            *v = (0..na)
                .map(|a| mdp.q_value(reward, &values, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        residual = max_abs_diff(&next, &values);
        std::mem::swap(&mut values, &mut next);
        if residual <= threshold {
            let actions = (0..ns)
                .map(|s| greedy_action(mdp, reward, &values, s))
                .collect();
            return Ok((DeterministicPolicy { actions }, ValueVector(values)));
        }
    }
    Err(Error::Divergence {
        solver: "value iteration",
        iterations: MAX_ITERATIONS,
        residual,
    })
}

fn greedy_action(mdp: &TabularMdp, reward: &[f64], values: &[f64], state: usize) -> usize {
    let mut best = 0;
    let mut best_q = f64::NEG_INFINITY;
    for a in 0..mdp.n_actions {
        let q = mdp.q_value(reward, values, state, a);
        if q > best_q {
            best = a;
            best_q = q;
        }
    }
    best
}

/// Value of `policy` under `reward`, within `tolerance` of the exact fixed point.
pub fn policy_evaluation<P: Policy>(
    mdp: &TabularMdp,
    policy: &P,
    reward: &[f64],
    tolerance: f64,
) -> Result<ValueVector> {
    check_tolerance(tolerance)?;
    mdp.check_reward(reward)?;
    if policy.n_states() != mdp.n_states {
        return Err(Error::DimensionMismatch {
            context: "policy states",
            expected: mdp.n_states,
            actual: policy.n_states(),
        });
    }
    let ns = mdp.n_states;
    let threshold = fixed_point_threshold(tolerance, mdp.discount);
    let mut values = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    let mut residual = f64::INFINITY;

    for _ in 0..MAX_ITERATIONS {
        for (s, v) in next.iter_mut().enumerate() {
            let mut expected = 0.0;
            policy.for_each_action(s, |a, p| expected += p * mdp.expected_next(&values, s, a));
            *v = reward[s] + mdp.discount * expected;
        }
        residual = max_abs_diff(&next, &values);
        std::mem::swap(&mut values, &mut next);
        if residual <= threshold {
            return Ok(ValueVector(values));
        }
    }
    Err(Error::Divergence {
        solver: "policy evaluation",
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
