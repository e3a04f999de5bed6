//! Chinese-restaurant-process bookkeeping and the sampling steps of the two
//! EM variants: the CRP prior, E-step responsibilities, the S-step draw and
//! the Metropolis-Hastings acceptance test.
//!
//! Mixing weights are marginalized out and never represented; only the
//! occupancy counts of the intentions are kept.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};

/// Latent intention assignments and occupancy counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CrpState {
    assignments: Vec<Option<usize>>,
    counts: Vec<usize>,
    alpha: f64,
}

impl CrpState {
    /// `n` unassigned trajectories.
    pub fn new(n: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            assignments: vec![None; n],
            counts: Vec::new(),
            alpha,
        })
    }

    /// Trajectory `m` goes to intention `m mod k` (at most `n` intentions).
    pub fn round_robin(n: usize, k: usize, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one intention".into()));
        }
        Self::from_assignments((0..n).map(|m| m % k).collect(), alpha)
    }

    /// Builds a state from explicit labels; labels must be `0..K` with every
    /// intention occupied.
    pub fn from_assignments(labels: Vec<usize>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        let mut counts = vec![0; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let state = Self {
            assignments: labels.into_iter().map(Some).collect(),
            counts,
            alpha,
        };
        state.check_invariants()?;
        Ok(state)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of occupied intentions.
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_trajectories(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignment(&self, m: usize) -> Option<usize> {
        self.assignments[m]
    }

    pub fn assignments(&self) -> &[Option<usize>] {
        &self.assignments
    }

    /// Hard labels; every trajectory must be assigned.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.assignments
            .iter()
            .enumerate()
            .map(|(m, a)| {
                a.ok_or_else(|| Error::InconsistentState(format!("trajectory {m} unassigned")))
            })
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut recount = vec![0; self.counts.len()];
        for (m, a) in self.assignments.iter().enumerate() {
            if let Some(k) = *a {
                if k >= self.counts.len() {
                    return Err(Error::InconsistentState(format!(
                        "trajectory {m} assigned to missing intention {k}"
                    )));
                }
                recount[k] += 1;
            }
        }
        if recount != self.counts {
            return Err(Error::InconsistentState(format!(
                "counts {:?} disagree with assignments {:?}",
                self.counts, recount
            )));
        }
        if let Some(k) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::InconsistentState(format!("intention {k} is empty")));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "concentration must be finite and >= 0, got {alpha}"
        )))
    }
}

/// CRP prior for one trajectory given all others.
#[derive(Debug, Clone, PartialEq)]
pub struct CrpPrior {
    /// Intentions (current state indices) still occupied without the excluded trajectory.
    pub labels: Vec<usize>,
    /// Their occupancy counts without the excluded trajectory.
    pub counts: Vec<usize>,
    /// `labels.len() + 1` probabilities; the last is the new-intention mass.
    pub probs: Vec<f64>,
    /// No other trajectory and zero concentration: all mass stays on the
    /// excluded trajectory's current intention.
    pub degenerate: bool,
}

impl CrpPrior {
    pub fn new_mass(&self) -> f64 {
        *self
            .probs
            .last()
            .expect("prior always has a new-intention entry")
    }
}

/// Prior `M_k^{-m} / (M−1+α)` for occupied intentions and `α / (M−1+α)`
/// for a new one, where `M−1` counts the other assigned trajectories.
pub fn crp_prior(state: &CrpState, exclude: Option<usize>) -> Result<CrpPrior> {
    let mut counts = state.counts.clone();
    let current = match exclude {
        Some(m) => {
            if m >= state.assignments.len() {
                return Err(Error::InvalidArgument(format!(
                    "trajectory {m} out of range"
                )));
            }
            let cur = state.assignments[m];
            if let Some(k) = cur {
                counts[k] -= 1;
            }
            cur
        }
        None => None,
    };
    let others: usize = counts.iter().sum();
    let (labels, counts): (Vec<usize>, Vec<usize>) = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .unzip();
    let denom = others as f64 + state.alpha;
    if denom == 0.0 {
        return match current {
            Some(k) => Ok(CrpPrior {
                labels: vec![k],
                counts: vec![0],
                probs: vec![1.0, 0.0],
                degenerate: true,
            }),
            None => Err(Error::DegeneratePrior),
        };
    }
    let mut probs: Vec<f64> = counts.iter().map(|&c| c as f64 / denom).collect();
    probs.push(state.alpha / denom);
    Ok(CrpPrior {
        labels,
        counts,
        probs,
        degenerate: false,
    })
}

/// Posterior responsibilities over `K` occupied intentions plus one new
/// intention: `γ_k ∝ M_k^{-m} exp(ℓ_k)` and `γ_{K+1} ∝ α exp(ℓ_{K+1})`.
pub fn estep_responsibilities(counts: &[usize], alpha: f64, logliks: &[f64]) -> Result<Vec<f64>> {
    if logliks.len() != counts.len() + 1 {
        return Err(Error::DimensionMismatch {
            context: "log-likelihoods",
            expected: counts.len() + 1,
            actual: logliks.len(),
        });
    }
    check_alpha(alpha)?;
    if logliks.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFinite("trajectory log-likelihood".into()));
    }
    let log_weights: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64)
        .chain(std::iter::once(alpha))
        .zip(logliks)
        .map(|(w, l)| {
            if w > 0.0 {
                w.ln() + l
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidAssignment);
    }
    let unnorm: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// Categorical draw from `gamma`.
pub fn sstep_sample<R: Rng>(gamma: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(gamma)
        .map_err(|e| Error::InvalidArgument(format!("responsibilities: {e}")))?;
    Ok(dist.sample(rng))
}

/// Accepts with probability `min(1, exp(proposed − current))`.
pub fn mh_accept<R: Rng>(current_loglik: f64, proposed_loglik: f64, rng: &mut R) -> bool {
    if proposed_loglik >= current_loglik {
        return true;
    }
    let u: f64 = rng.gen();
    u < (proposed_loglik - current_loglik).exp()
}

/// Where to move a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Existing(usize),
    New,
}

/// Structural changes caused by [`apply_assignment`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentEvents {
    /// Index (after any pruning) of a newly created intention.
    pub born: Option<usize>,
    /// Old-to-new intention map when an intention was emptied and removed.
    pub remap: Option<Vec<Option<usize>>>,
}

impl AssignmentEvents {
    /// Surviving old intention indices, for pruning parallel per-intention data.
    pub fn occupied(&self) -> Option<Vec<usize>> {
        self.remap.as_ref().map(|remap| {
            remap
                .iter()
                .enumerate()
                .filter_map(|(k, r)| r.map(|_| k))
                .collect()
        })
    }
}

/// Moves trajectory `m` to `target`, creating and pruning intentions as needed.
pub fn apply_assignment(
    state: &mut CrpState,
    m: usize,
    target: Target,
) -> Result<AssignmentEvents> {
    if m >= state.assignments.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory {m} out of range"
        )));
    }
    let old = state.assignments[m];
    let mut new = match target {
        Target::Existing(k) if k >= state.counts.len() => {
            return Err(Error::InvalidArgument(format!(
                "intention {k} out of range (K = {})",
                state.counts.len()
            )))
        }
        Target::Existing(k) if old == Some(k) => return Ok(AssignmentEvents::default()),
        Target::Existing(k) => k,
        Target::New => {
            state.counts.push(0);
            state.counts.len() - 1
        }
    };
    if let Some(k) = old {
        state.counts[k] -= 1;
    }
    state.counts[new] += 1;
    state.assignments[m] = Some(new);

    let mut events = AssignmentEvents::default();
    if let Some(k) = old.filter(|&k| state.counts[k] == 0) {
        let remap: Vec<Option<usize>> = (0..state.counts.len())
            .map(|j| match j.cmp(&k) {
                std::cmp::Ordering::Less => Some(j),
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => Some(j - 1),
            })
            .collect();
        state.counts.remove(k);
        for a in state.assignments.iter_mut().flatten() {
            *a = remap[*a].expect("emptied intention has no members");
        }
        new = remap[new].expect("target intention is occupied");
        events.remap = Some(remap);
    }
    if target == Target::New {
        events.born = Some(new);
    }
    state.check_invariants()?;
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn prior_direct_substitution() {
        // counts (2,1) after excluding trajectory 3 from a third intention
        let state = CrpState::from_assignments(vec![0, 0, 1, 2], 1.0).unwrap();
        let prior = crp_prior(&state, Some(3)).unwrap();
        assert_eq!(prior.labels, vec![0, 1]);
        assert!(close(&prior.probs, &[0.5, 0.25, 0.25], 1e-15));
    }

    #[test]
    fn prior_zero_alpha() {
        let state = CrpState::from_assignments(vec![0, 0, 0, 0], 0.0).unwrap();
        let prior = crp_prior(&state, Some(1)).unwrap();
        assert_eq!(prior.probs, vec![1.0, 0.0]);
    }

    #[test]
    fn prior_first_trajectory() {
        let state = CrpState::new(1, 0.5).unwrap();
        let prior = crp_prior(&state, Some(0)).unwrap();
        assert!(prior.labels.is_empty());
        assert_eq!(prior.probs, vec![1.0]);
    }

    #[test]
    fn prior_degenerate_cases() {
        let state = CrpState::from_assignments(vec![0], 0.0).unwrap();
        let prior = crp_prior(&state, Some(0)).unwrap();
        assert!(prior.degenerate);
        assert_eq!(prior.labels, vec![0]);
        assert_eq!(prior.probs, vec![1.0, 0.0]);

        let empty = CrpState::new(1, 0.0).unwrap();
        assert!(matches!(
            crp_prior(&empty, Some(0)),
            Err(Error::DegeneratePrior)
        ));
    }

    #[test]
    fn responsibilities_cancelling_likelihoods() {
        let g = estep_responsibilities(&[3], 1.0, &[-4.0, -4.0]).unwrap();
        assert!(close(&g, &[0.75, 0.25], 1e-15));
    }

    #[test]
    fn responsibilities_zero_alpha() {
        let g = estep_responsibilities(&[2, 1], 0.0, &[-10.0, -12.0, 50.0]).unwrap();
        assert_eq!(g[2], 0.0);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn responsibilities_direct_arithmetic() {
        let ll = [0.4f64.ln(), 0.1f64.ln(), 0.1f64.ln()];
        let g = estep_responsibilities(&[1, 1], 1.0, &ll).unwrap();
        assert!(close(&g, &[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1e-12));
    }

    #[test]
    fn responsibilities_errors() {
        let ninf = f64::NEG_INFINITY;
        assert!(matches!(
            estep_responsibilities(&[1], 1.0, &[ninf, ninf]),
            Err(Error::NoValidAssignment)
        ));
        assert!(estep_responsibilities(&[1], 1.0, &[0.0]).is_err());
        assert!(estep_responsibilities(&[1], 1.0, &[f64::NAN, 0.0]).is_err());
        // one impossible intention is fine
        let g = estep_responsibilities(&[1, 2], 1.0, &[ninf, -1.0, -1.0]).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn sstep_one_hot_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sstep_sample(&[0.0, 1.0, 0.0], &mut rng).unwrap(), 1);
        }
        let a = sstep_sample(&[0.3, 0.3, 0.4], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sstep_sample(&[0.3, 0.3, 0.4], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sstep_frequencies() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..n)
            .filter(|_| sstep_sample(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn mh_accept_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(mh_accept(-5.0, -4.0, &mut rng));
        assert!(mh_accept(-5.0, -5.0, &mut rng));
        assert!(mh_accept(f64::NEG_INFINITY, f64::NEG_INFINITY, &mut rng));
        assert!(!mh_accept(-1.0, f64::NEG_INFINITY, &mut rng));

        let n = 100_000;
        let accepted = (0..n)
            .filter(|_| mh_accept(0.0, 0.3f64.ln(), &mut rng))
            .count();
        let sigma = (0.3 * 0.7 / n as f64).sqrt();
        assert!((accepted as f64 / n as f64 - 0.3).abs() < 3.0 * sigma);
    }

    #[test]
    fn assignment_to_own_intention_is_noop() {
        let mut state = CrpState::from_assignments(vec![0, 1, 1], 1.0).unwrap();
        let before = state.clone();
        let ev = apply_assignment(&mut state, 0, Target::Existing(0)).unwrap();
        assert_eq!(ev, AssignmentEvents::default());
        assert_eq!(state, before);
    }

    #[test]
    fn emptied_intention_is_pruned() {
        let mut state = CrpState::from_assignments(vec![0, 1, 0, 2], 1.0).unwrap();
        let ev = apply_assignment(&mut state, 1, Target::Existing(0)).unwrap();
        assert_eq!(ev.remap, Some(vec![Some(0), None, Some(1)]));
        assert_eq!(ev.occupied(), Some(vec![0, 2]));
        assert_eq!(state.k(), 2);
        assert_eq!(state.counts(), &[3, 1]);
        assert_eq!(state.labels().unwrap(), vec![0, 0, 0, 1]);
    }

    #[test]
    fn birth_after_pruning() {
        let mut state = CrpState::from_assignments(vec![0, 1, 1], 1.0).unwrap();
        let ev = apply_assignment(&mut state, 0, Target::New).unwrap();
        // intention 0 dies, the newborn lands at index 1
        assert_eq!(ev.born, Some(1));
        assert_eq!(ev.remap, Some(vec![None, Some(0), Some(1)]));
        assert_eq!(state.labels().unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn prior_is_exchangeable() {
        let a = CrpState::from_assignments(vec![0, 0, 1, 2, 2, 2], 0.7).unwrap();
        let b = CrpState::from_assignments(vec![2, 2, 0, 1, 1, 1], 0.7).unwrap();
        let mut pa = crp_prior(&a, Some(5)).unwrap().probs;
        let mut pb = crp_prior(&b, Some(5)).unwrap().probs;
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        assert_eq!(pa, pb);
    }

    proptest! {
        #[test]
        fn random_operation_sequences_keep_invariants(
            seed in 0u64..10_000,
            n in 1usize..12,
            ops in proptest::collection::vec((0usize..12, 0usize..8), 1..60),
        ) {
            let mut state = CrpState::round_robin(n, 1 + (seed as usize % 3), 1.0).unwrap();
            for (m, t) in ops {
                let m = m % n;
                let target = if t >= state.k() { Target::New } else { Target::Existing(t) };
                let k_before = state.k();
                let ev = apply_assignment(&mut state, m, target).unwrap();
                state.check_invariants().unwrap();
                prop_assert_eq!(state.counts().iter().sum::<usize>(), n);
                let expected_k = k_before + ev.born.is_some() as usize - ev.remap.is_some() as usize;
                prop_assert_eq!(state.k(), expected_k);
            }
        }

        #[test]
        fn prior_sums_to_one(counts in proptest::collection::vec(1usize..6, 1..6), alpha in 0.0f64..5.0) {
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
            let state = CrpState::from_assignments(labels.clone(), alpha).unwrap();
            for m in 0..labels.len() {
                if let Ok(prior) = crp_prior(&state, Some(m)) {
                    prop_assert!((prior.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn responsibilities_shift_invariant(ll in proptest::collection::vec(-30.0f64..0.0, 3), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = ll.iter().map(|x| x + c).collect();
            let a = estep_responsibilities(&[2, 3], 0.8, &ll).unwrap();
            let b = estep_responsibilities(&[2, 3], 0.8, &shifted).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
