//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --release --test acceptance -- 1 4 10`.
//! The exit status reflects failed criteria only with `--strict`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use miirl::crp::{crp_prior, estep_responsibilities, CrpState};
use miirl::envs::{rollout, EnvKind, Trajectory};
use miirl::experiment::{run_experiment, ExperimentConfig, ExperimentOutput, RunSummary};
use miirl::maxent::{expected_svf, mstep_state_weights, trajectory_svf, SvfVector};
use miirl::mdp::{soft_value_iteration, soft_value_iteration_finite, StochasticPolicy, TabularMdp};
use miirl::output::write_outputs;
use miirl::reward_model::{NetShape, RewardNet};
use miirl::trainers::Algorithm;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Random MDP with deterministic transitions and a uniform start distribution.
fn deterministic_mdp(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularMdp {
    let rows = (0..ns * na)
        .map(|_| vec![(rng.gen_range(0..ns), 1.0)])
        .collect();
    TabularMdp::new(ns, na, rows, 0.9, vec![1.0 / ns as f64; ns]).unwrap()
}

/// Visits every state/action sequence of `horizon` steps from `s0`, passing
/// the visited states and the product of policy factors.
fn enumerate_paths(
    mdp: &TabularMdp,
    horizon: usize,
    s0: usize,
    factor: &dyn Fn(usize, usize, usize) -> f64,
    visit: &mut dyn FnMut(&[usize], f64),
) {
    let na = mdp.n_actions();
    for code in 0..na.pow(horizon as u32) {
        let (mut s, mut c, mut prob) = (s0, code, 1.0);
        let mut states = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let a = c % na;
            c /= na;
            states.push(s);
            prob *= factor(t, s, a);
            s = mdp.successors(s, a)[0].0;
        }
        visit(&states, prob);
    }
}

/// Time-indexed expected SVF of finite-horizon policies from one start state.
fn finite_horizon_svf(mdp: &TabularMdp, policies: &[StochasticPolicy], s0: usize) -> SvfVector {
    let ns = mdp.n_states();
    let mut d = vec![0.0; ns];
    d[s0] = 1.0;
    let mut visits = vec![0.0; ns];
    for policy in policies {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            visits[s] += d[s];
            for a in 0..mdp.n_actions() {
                for &(s2, p) in mdp.successors(s, a) {
                    next[s2] += d[s] * policy.prob(s, a) * p;
                }
            }
        }
        d = next;
    }
    SvfVector { visits }
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (ns, na, horizon, d) = (16, 4, 5, 6);
    let mdp = deterministic_mdp(&mut rng, ns, na);
    let features = ndarray::Array2::from_shape_fn((ns, d), |_| rng.gen_range(-1.0..1.0));
    let shape = NetShape {
        hidden_layers: 2,
        hidden_width: 8,
        reward_feature_dim: 8,
        head_bias: true,
    };
    let net = RewardNet::new(d, shape, 2, 7).unwrap();
    let demos: Vec<Trajectory> = (0..6)
        .map(|_| Trajectory {
            steps: (0..horizon)
                .map(|_| (rng.gen_range(0..ns), rng.gen_range(0..na)))
                .collect(),
            true_intention: None,
        })
        .map(|t| {
            // make each demo a feasible path of the deterministic MDP
            let mut s = t.steps[0].0;
            let steps = t
                .steps
                .iter()
                .map(|&(_, a)| {
                    let step = (s, a);
                    s = mdp.successors(s, a)[0].0;
                    step
                })
                .collect();
            Trajectory {
                steps,
                true_intention: None,
            }
        })
        .collect();
    let gammas: Vec<[f64; 2]> = (0..demos.len())
        .map(|_| {
            let g = rng.gen_range(0.0..1.0);
            [g, 1.0 - g]
        })
        .collect();

    // Expected complete-data log-likelihood Σ_m Σ_k γ_mk log P_k(τ_m).
    let objective = |net: &RewardNet| -> f64 {
        let mut total = 0.0;
        for k in 0..2 {
            let reward = net.forward(&features, k).unwrap();
            let policies = soft_value_iteration_finite(&mdp, &reward, horizon).unwrap();
            for (demo, g) in demos.iter().zip(&gammas) {
                let ll: f64 = demo
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, &(s, a))| policies[t].prob(s, a).ln())
                    .sum();
                total += g[k] * ll;
            }
        }
        total
    };

    let started = Instant::now();
    let cache = net.base_forward(&features).unwrap();
    let policies: Vec<Vec<StochasticPolicy>> = (0..2)
        .map(|k| {
            let reward = net.head_forward(&cache, k).unwrap();
            soft_value_iteration_finite(&mdp, &reward, horizon).unwrap()
        })
        .collect();
    let mut weights = vec![vec![0.0; ns]; 2];
    for (demo, g) in demos.iter().zip(&gammas) {
        let s0 = demo.steps[0].0;
        let expected: Vec<SvfVector> = policies
            .iter()
            .map(|p| finite_horizon_svf(&mdp, p, s0))
            .collect();
        let w = mstep_state_weights(g, &trajectory_svf(demo, ns), &expected).unwrap();
        for k in 0..2 {
            for s in 0..ns {
                weights[k][s] += w[k][s];
            }
        }
    }
    let terms: Vec<(usize, &[f64])> = weights
        .iter()
        .enumerate()
        .map(|(k, w)| (k, w.as_slice()))
        .collect();
    let analytic = net.backward_cached(&cache, &terms).unwrap().flatten();

    let params = net.parameters();
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    // Reward shifts that are constant over states (last-layer and head biases
    // feeding every state equally) leave the max-ent likelihood unchanged, so
    // their exact gradient is zero and the difference quotient is pure rounding
    // noise; those components are held to an absolute bound instead.
    let mut zero_components = 0;
    let mut worst_zero: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        probe.set_parameters(&p).unwrap();
        let up = objective(&probe);
        p[i] -= 2.0 * h;
        probe.set_parameters(&p).unwrap();
        let down = objective(&probe);
        let fd = (up - down) / (2.0 * h);
        if analytic[i].abs() < 1e-12 {
            zero_components += 1;
            worst_zero = worst_zero.max(fd.abs());
            continue;
        }
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs());
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    verdict(
        worst < 1e-4 && worst_zero < 1e-8 && elapsed < Duration::from_secs(10),
        format!(
            "{} parameters, max relative error {worst:.2e} (< 1e-4); {zero_components} zero-gradient components with |fd| <= {worst_zero:.1e} (< 1e-8); {:.2}s (< 10s)",
            params.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// The 20 small deterministic instances shared by criteria 2 and 3.
fn small_instances() -> Vec<(TabularMdp, Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..20)
        .map(|_| {
            let ns = rng.gen_range(1..=5);
            let na = rng.gen_range(1..=3);
            let horizon = rng.gen_range(1..=4);
            let mdp = deterministic_mdp(&mut rng, ns, na);
            let reward = (0..ns).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (mdp, reward, horizon)
        })
        .collect()
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    for (mdp, reward, horizon) in small_instances() {
        let policies = soft_value_iteration_finite(&mdp, &reward, horizon).unwrap();
        for s0 in 0..mdp.n_states() {
            let mut paths = Vec::new();
            enumerate_paths(
                &mdp,
                horizon,
                s0,
                &|t, s, a| policies[t].prob(s, a),
                &mut |states, prob| {
                    paths.push((states.iter().map(|&s| reward[s]).sum::<f64>(), prob))
                },
            );
            let z: f64 = paths.iter().map(|(r, _)| r.exp()).sum();
            for (r, prob) in paths {
                worst = worst.max((r.exp() / z - prob).abs());
            }
        }
    }
    verdict(
        worst < 1e-6,
        format!("20 instances, max |exp(R)/Z - Π π| = {worst:.2e} (< 1e-6)"),
    )
}

fn criterion_3() -> Verdict {
    let mut worst_exact: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    for (mdp, reward, horizon) in small_instances() {
        let ns = mdp.n_states();
        let policy = soft_value_iteration(&mdp, &reward, 1e-10).unwrap();
        let svf = expected_svf(&mdp, &policy, horizon).unwrap();

        let mut exact = vec![0.0; ns];
        for s0 in 0..ns {
            let w = mdp.start_distribution()[s0];
            enumerate_paths(
                &mdp,
                horizon,
                s0,
                &|_, s, a| policy.prob(s, a),
                &mut |states, prob| {
                    for &s in states {
                        exact[s] += w * prob;
                    }
                },
            );
        }
        for (a, b) in svf.visits.iter().zip(&exact) {
            worst_exact = worst_exact.max((a - b).abs());
        }

        let mut sum = vec![0.0; ns];
        let mut sum_sq = vec![0.0; ns];
        for _ in 0..n {
            let counts = trajectory_svf(&rollout(&mdp, &policy, horizon, &mut rng), ns).visits;
            for s in 0..ns {
                sum[s] += counts[s];
                sum_sq[s] += counts[s] * counts[s];
            }
        }
        for s in 0..ns {
            let mean = sum[s] / n as f64;
            let var = (sum_sq[s] / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let gap = (mean - svf.visits[s]).abs();
            let z = if se > 0.0 {
                gap / se
            } else if gap < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst_z = worst_z.max(z);
        }
    }
    verdict(
        worst_exact < 1e-10 && worst_z <= 3.0,
        format!(
            "enumeration gap {worst_exact:.2e} (< 1e-10), worst Monte Carlo deviation {worst_z:.2} SE (<= 3) over 20 instances x 100000 rollouts"
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut zero_alpha_ok = true;
    for config in 0..100 {
        let alpha = if config % 10 == 0 {
            0.0
        } else {
            rng.gen_range(0.01..10.0)
        };
        let n = rng.gen_range(2..20);
        let k = rng.gen_range(1..=n.min(5));
        let labels: Vec<usize> = (0..n)
            .map(|m| if m < k { m } else { rng.gen_range(0..k) })
            .collect();
        let state = CrpState::from_assignments(labels.clone(), alpha).unwrap();
        let m = rng.gen_range(0..n);

        // prior oracle
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            if i != m {
                counts[l] += 1;
            }
        }
        let occupied: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        let denom = (n - 1) as f64 + alpha;
        let mut oracle: Vec<f64> = occupied.iter().map(|&c| c as f64 / denom).collect();
        oracle.push(alpha / denom);
        let prior = crp_prior(&state, Some(m)).unwrap();
        if prior.probs.len() != oracle.len() {
            return verdict(false, format!("config {config}: prior length mismatch"));
        }
        for (a, b) in prior.probs.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((prior.probs.iter().sum::<f64>() - 1.0).abs());

        // E-step oracle
        let logliks: Vec<f64> = (0..=occupied.len())
            .map(|_| rng.gen_range(-30.0..0.0))
            .collect();
        let gamma = estep_responsibilities(&prior.counts, alpha, &logliks).unwrap();
        let unnorm: Vec<f64> = occupied
            .iter()
            .map(|&c| c as f64)
            .chain(std::iter::once(alpha))
            .zip(&logliks)
            .map(|(w, l)| w * l.exp())
            .collect();
        let total: f64 = unnorm.iter().sum();
        for (a, b) in gamma.iter().zip(&unnorm) {
            worst = worst.max((a - b / total).abs());
        }
        worst_sum = worst_sum.max((gamma.iter().sum::<f64>() - 1.0).abs());
        if alpha == 0.0 && (prior.new_mass() != 0.0 || *gamma.last().unwrap() != 0.0) {
            zero_alpha_ok = false;
        }
    }
    verdict(
        worst < 1e-12 && worst_sum < 1e-12 && zero_alpha_ok,
        format!(
            "100 configurations, max oracle gap {worst:.2e}, max |sum - 1| {worst_sum:.2e} (< 1e-12), zero alpha leaves no new mass: {zero_alpha_ok}"
        ),
    )
}

fn summaries(output: &ExperimentOutput, point: usize) -> Vec<&RunSummary> {
    output
        .outcomes_for(point)
        .filter_map(|o| o.result.as_ref().ok())
        .collect()
}

fn timed(config: &ExperimentConfig) -> (ExperimentOutput, Duration) {
    let started = Instant::now();
    let out = run_experiment(config).expect("valid configuration");
    (out, started.elapsed())
}

fn criterion_5() -> Verdict {
    let mut c = ExperimentConfig::new(EnvKind::GridWorld);
    c.intentions = vec![0];
    c.demos_per_intention = 32;
    c.demo_length = 40;
    c.train.fixed_k = Some(1);
    c.train.k_init = 1;
    c.seed = 5;
    let (out, elapsed) = timed(&c);
    let ratios: Vec<f64> = summaries(&out, 0)
        .iter()
        .map(|s| s.final_eval.avg_evd / s.initial.avg_evd)
        .collect();
    let good = ratios.iter().filter(|&&r| r < 0.2).count();
    verdict(
        good >= 5 && ratios.len() == 6 && elapsed < Duration::from_secs(300),
        format!(
            "final/initial avg-EVD {} -> {good}/6 below 0.2 (need 5), {:.0}s (< 300s)",
            fmt_list(&ratios),
            elapsed.as_secs_f64()
        ),
    )
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", items.join(", "))
}

fn multi_intention_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(EnvKind::MBinaryWorld);
    c.intentions = vec![0, 1, 2];
    c.demos_per_intention = 16;
    c.alphas = vec![1.0];
    c.train.alpha = 1.0;
    c.record_wall_time = true;
    c.seed = 6;
    c
}

/// Shared criterion 6/8/9 runs: SEM at α = 1.
struct MultiIntention {
    sem: ExperimentOutput,
    elapsed: Duration,
}

fn criterion_6(m: &MultiIntention) -> Verdict {
    let runs = summaries(&m.sem, 0);
    let ks: Vec<f64> = runs.iter().map(|s| s.k_predicted as f64).collect();
    let acc: Vec<f64> = runs.iter().map(|s| s.accuracy).collect();
    let good = runs
        .iter()
        .filter(|s| (2..=4).contains(&s.k_predicted) && s.accuracy >= 0.8)
        .count();
    verdict(
        good >= 4 && m.elapsed < Duration::from_secs(1200),
        format!(
            "K {} accuracy {} -> {good}/6 with K in 2..=4 and accuracy >= 0.8 (need 4), {:.0}s (< 1200s)",
            fmt_list(&ks),
            fmt_list(&acc),
            m.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut c = ExperimentConfig::new(EnvKind::MBinaryWorld);
    c.intentions = vec![0];
    c.demos_per_intention = 16;
    c.seed = 7;
    let sem = timed(&c).0;
    c.train.fixed_k = Some(5);
    c.train.k_init = 5;
    let fixed = timed(&c).0;
    let a: Vec<f64> = summaries(&sem, 0)
        .iter()
        .map(|s| s.final_eval.avg_evd)
        .collect();
    let b: Vec<f64> = summaries(&fixed, 0)
        .iter()
        .map(|s| s.final_eval.avg_evd)
        .collect();
    let ks: Vec<f64> = summaries(&sem, 0)
        .iter()
        .map(|s| s.k_predicted as f64)
        .collect();
    let good = a.iter().zip(&b).filter(|(s, f)| f >= s).count();
    verdict(
        good >= 4 && a.len() == 6 && b.len() == 6,
        format!(
            "final avg-EVD SEM {} (K {}) 5EM {} -> 5EM >= SEM in {good}/6 (need 4)",
            fmt_list(&a),
            fmt_list(&ks),
            fmt_list(&b)
        ),
    )
}

fn criterion_8(m: &MultiIntention) -> Verdict {
    let mut c = multi_intention_config();
    c.alphas = vec![0.1, 10.0];
    let other = timed(&c).0;
    let mean_k = |runs: Vec<&RunSummary>| {
        runs.iter().map(|s| s.k_predicted as f64).sum::<f64>() / runs.len() as f64
    };
    let means = [
        mean_k(summaries(&other, 0)),
        mean_k(summaries(&m.sem, 0)),
        mean_k(summaries(&other, 1)),
    ];
    verdict(
        means[0] <= means[1] && means[1] <= means[2],
        format!(
            "mean K at alpha 0.1, 1, 10: {} (nondecreasing)",
            fmt_list(&means)
        ),
    )
}

fn criterion_9(m: &MultiIntention) -> Verdict {
    let mut c = multi_intention_config();
    c.algorithms = vec![Algorithm::Mcem];
    let mcem = timed(&c).0;
    let mean_ms = |runs: Vec<&RunSummary>| {
        runs.iter().map(|s| s.mean_iteration_ms).sum::<f64>() / runs.len() as f64
    };
    let (sem_ms, mcem_ms) = (mean_ms(summaries(&m.sem, 0)), mean_ms(summaries(&mcem, 0)));
    verdict(
        mcem_ms < sem_ms,
        format!("mean per-iteration time MCEM {mcem_ms:.1} ms vs SEM {sem_ms:.1} ms"),
    )
}

fn criterion_10() -> Verdict {
    let mut c = ExperimentConfig::new(EnvKind::GridWorld);
    c.intentions = vec![0, 1];
    c.demos_per_intention = 4;
    c.repeats = 2;
    c.train.max_iter = 5;
    c.seed = 10;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let files: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            write_outputs(&run_experiment(&c).unwrap(), d.path()).unwrap();
            std::fs::read(d.path().join("runs.csv")).unwrap()
        })
        .collect();
    verdict(
        files[0] == files[1] && !files[0].is_empty(),
        format!(
            "two executions wrote {} and {} identical bytes: {}",
            files[0].len(),
            files[1].len(),
            files[0] == files[1]
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let selected: BTreeSet<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: u32, name: &str, check: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let v = check();
        println!(
            "{} criterion {n} ({name}): {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failures += 1;
        }
    };
    report(1, "gradient check", &mut criterion_1);
    report(2, "max-ent enumeration", &mut criterion_2);
    report(3, "state visitation", &mut criterion_3);
    report(4, "CRP algebra", &mut criterion_4);
    report(5, "single-intention recovery", &mut criterion_5);
    let multi = (wanted(6) || wanted(8) || wanted(9)).then(|| {
        let (sem, elapsed) = timed(&multi_intention_config());
        MultiIntention { sem, elapsed }
    });
    if let Some(m) = &multi {
        report(6, "multi-intention recovery", &mut || criterion_6(m));
    }
    report(7, "fixed-K degradation", &mut criterion_7);
    if let Some(m) = &multi {
        report(8, "alpha monotonicity", &mut || criterion_8(m));
        report(9, "timing direction", &mut || criterion_9(m));
    }
    report(10, "determinism", &mut criterion_10);
    if failures == 0 {
        println!("all criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("{failures} criteria failed");
    // a failing criterion is a finding, not a broken build; --strict turns it into one
    if strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
