mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;

use regime_select::estimator::{e_step, em_fit, EmConfig};
use regime_select::io::{parse_trajectory, trajectory_csv};
use regime_select::likelihood::{
    conditional_loglik, loglik_bruteforce, loglik_forward, ols_fit, segment_stats, Segment,
};
use regime_select::mixture::{kt_path_mixture_log, Projection};
use regime_select::model::{
    simulate, stationary_distribution, validate_model, ModelSpec, ParameterBounds, RegimeParams, Trajectory,
    TransitionMatrix,
};
use regime_select::numeric::{for_each_path, log_sum_exp};
use regime_select::seed::rng_from_seed;
use regime_select::selection::{penalty, PenaltyConfig};

use common::*;

fn permutations(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_path(m, m, |p| {
        let mut seen = vec![false; m];
        if p.iter().all(|&i| !std::mem::replace(&mut seen[i], true)) {
            out.push(p.to_vec());
        }
    });
    out
}

fn instance(m: usize, n: usize, seed: u64) -> (ModelSpec, Trajectory) {
    let mut rng = rng_from_seed(seed);
    let spec = random_spec(m, &mut rng);
    let y0 = rng.gen_range(-2.0..2.0);
    let t = simulate(&spec, n, y0, seed ^ 0xABCD).unwrap();
    (spec, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stationary_is_a_fixed_point(m in 1usize..=6, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() + 1e-3 }).collect();
                let s: f64 = raw.iter().sum();
                if s == 0.0 { vec![1.0 / m as f64; m] } else { raw.iter().map(|v| v / s).collect() }
            })
            .collect();
        let a = TransitionMatrix::from_rows(&rows).unwrap();
        prop_assume!(a.is_irreducible() && a.is_primitive());
        let lambda = stationary_distribution(&a).unwrap();
        for j in 0..m {
            let v: f64 = (0..m).map(|i| lambda[i] * a.get(i, j)).sum();
            prop_assert!((v - lambda[j]).abs() < 1e-10);
        }
        prop_assert!((lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_enumeration(m in 1usize..=3, n in 1usize..=8, seed in any::<u64>()) {
        let (spec, t) = instance(m, n, seed);
        let f = loglik_forward(&spec, &t).unwrap();
        let b = loglik_bruteforce(&spec, &t).unwrap();
        prop_assert!((f - b).abs() <= 1e-9, "forward {f} brute {b}");
    }

    #[test]
    fn path_terms_sum_to_bruteforce(m in 1usize..=3, n in 1usize..=6, seed in any::<u64>()) {
        let (spec, t) = instance(m, n, seed);
        let joint: Vec<f64> = joint_logs(&spec, &t).into_iter().map(|(_, v)| v).collect();
        let b = loglik_bruteforce(&spec, &t).unwrap();
        prop_assert!((log_sum_exp(&joint) - b).abs() <= 1e-12);
    }

    #[test]
    fn forward_is_label_invariant(m in 2usize..=3, n in 5usize..=60, seed in any::<u64>()) {
        let (spec, t) = instance(m, n, seed);
        let base = loglik_forward(&spec, &t).unwrap();
        for p in permutations(m) {
            let v = loglik_forward(&spec.permuted(&p).unwrap(), &t).unwrap();
            prop_assert!((v - base).abs() <= 1e-10);
        }
    }

    #[test]
    fn ols_is_optimal_and_matches_normal_equations(n in 3usize..40, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let (x, y) = random_line_data(n, &mut rng);
        let t = Trajectory::with_path(x[0], y.clone(), vec![0; n]).unwrap();
        let lagged: Vec<f64> = (0..n).map(|k| t.lagged(k)).collect();
        let fit = ols_fit(&segment_stats(&t, 1).unwrap()).unwrap()[0];
        let reference = normal_equations(&lagged, &y);
        for (got, want) in fit.theta.iter().zip(reference) {
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
        let best = conditional_loglik(&[fit.params(0.0)], &t).unwrap();
        for _ in 0..20 {
            let p = RegimeParams::new(
                fit.theta[0] + rng.gen_range(-0.5..0.5),
                fit.theta[1] + rng.gen_range(-0.5..0.5),
                fit.sigma2 * rng.gen_range(-0.5f64..0.5).exp(),
            );
            prop_assert!(conditional_loglik(&[p], &t).unwrap() <= best + 1e-9);
        }
        let wider = RegimeParams::new(fit.theta[0], fit.theta[1], fit.sigma2 * rng.gen_range(1.01..3.0));
        prop_assert!(conditional_loglik(&[wider], &t).unwrap() < best);
    }

    #[test]
    fn projection_ordering_and_idempotence(n in 3usize..15, tau_idx in 0usize..3, seed in any::<u64>()) {
        let tau2 = [0.1, 1.0, 10.0][tau_idx];
        let mut rng = rng_from_seed(seed);
        let (x, y) = random_line_data(n, &mut rng);
        let seg = Segment {
            times: (1..=n).collect(),
            design: nalgebra::DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r] }),
            response: nalgebra::DVector::from_column_slice(&y),
        };
        let proj = Projection::new(&seg, tau2);
        let b = proj.b.expect("non-degenerate design");
        let yv = &seg.response;
        let yp = (yv.transpose() * &proj.p * yv)[(0, 0)];
        let yb = (yv.transpose() * &b * yv)[(0, 0)];
        prop_assert!(yb <= yp * (1.0 + 1e-12) + 1e-12);
        let sq = &b * &b;
        for r in 0..n {
            for c in 0..n {
                prop_assert!((sq[(r, c)] - b[(r, c)]).abs() < 1e-9);
                prop_assert!((b[(r, c)] - b[(c, r)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kt_matches_beta_integrals(path in proptest::collection::vec(0usize..2, 1..14)) {
        let v = kt_path_mixture_log(&path, 2).unwrap();
        prop_assert!((v - kt_two_state_oracle(&path)).abs() < 1e-10);
    }

    #[test]
    fn e_step_matches_enumeration(m in 1usize..=3, n in 1usize..=6, seed in any::<u64>()) {
        let (spec, t) = instance(m, n, seed);
        let post = e_step(&spec, &t).unwrap();
        let (gamma, xi) = brute_posteriors(&spec, &t);
        prop_assert!((post.loglik - loglik_forward(&spec, &t).unwrap()).abs() <= 1e-10);
        for (a, b) in post.gamma.iter().zip(&gamma) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in post.xi.iter().zip(&xi) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for k in 0..n {
            let s: f64 = (0..m).map(|i| post.gamma(k, i)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        for k in 0..n.saturating_sub(1) {
            let s: f64 = post.xi[k * m * m..(k + 1) * m * m].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_round_trip(y0 in -1e300f64..1e300, ys in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let t = Trajectory::new(y0, ys);
        let back = parse_trajectory(&trajectory_csv(&t), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_traces_never_decrease(m in 1usize..=3, n in 30usize..120, seed in any::<u64>()) {
        let (_, t) = instance(2, n, seed);
        let fit = match em_fit(&t, m, &EmConfig::default(), seed) {
            Err(regime_select::Error::RegimeStarvation { .. }) => return Ok(()),
            other => other.unwrap(),
        };
        for w in fit.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        let post = e_step(&fit.spec, &t).unwrap();
        prop_assert!((post.loglik - loglik_forward(&fit.spec, &t).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn single_violations_are_isolated(m in 1usize..=3, kind in 0usize..3, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let spec = random_spec(m, &mut rng);
        let bounds = ParameterBounds::default();
        prop_assert!(validate_model(&spec, &bounds).is_empty());
        let mut regimes = spec.regimes().to_vec();
        let expected = match kind {
            0 => { regimes[0].sigma2 = 2.0 * bounds.d; "variance-bounds" }
            1 => { regimes[0].intercept = 2.0 * bounds.b_max; "parameter-box" }
            _ => { regimes.iter_mut().for_each(|r| r.ar = 1.5); "stability" }
        };
        let bad = ModelSpec::new(regimes, spec.transition().clone()).unwrap();
        let names: Vec<&str> = validate_model(&bad, &bounds).iter().map(|v| v.name()).collect();
        prop_assert_eq!(names, vec![expected]);
    }
}

#[test]
fn kt_mixture_is_a_probability_over_paths() {
    for m in 1..=2 {
        for n in 1..=8 {
            let mut logs = Vec::new();
            for_each_path(m, n, |p| logs.push(kt_path_mixture_log(p, m).unwrap()));
            assert_abs_diff_eq!(log_sum_exp(&logs), 0.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn penalty_grows_in_m_and_is_sublinear_in_n() {
    let cfg = PenaltyConfig::default();
    for n in [100usize, 1_000, 10_000, 100_000, 1_000_000] {
        for m in 1..=6 {
            assert!(penalty(n, m + 1, &cfg).unwrap() > penalty(n, m, &cfg).unwrap());
        }
    }
    for m in 1..=6 {
        let per_n: Vec<f64> = [10_000usize, 20_000, 50_000, 100_000, 1_000_000, 10_000_000]
            .iter()
            .map(|&n| penalty(n, m, &cfg).unwrap() / n as f64)
            .collect();
        assert!(per_n.windows(2).all(|w| w[1] < w[0]), "m = {m}: {per_n:?}");
    }
}

#[test]
fn simulated_innovations_are_standard_normal() {
    use statrs::distribution::{ContinuousCDF, Normal};
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n = 10_000;
    // 1% critical value of the one-sample Kolmogorov-Smirnov statistic
    let critical = 1.628 / (n as f64).sqrt();
    for seed in 0..5u64 {
        let mut rng = rng_from_seed(seed);
        let m = rng.gen_range(1..=3);
        let spec = random_spec(m, &mut rng);
        let t = simulate(&spec, n, 0.5, seed).unwrap();
        let path = t.path.clone().unwrap();
        let mut e: Vec<f64> = (0..n)
            .map(|k| {
                let r = spec.regimes()[path[k]];
                (t.y[k] - r.mean(t.lagged(k))) / r.sigma2.sqrt()
            })
            .collect();
        let mean = e.iter().sum::<f64>() / n as f64;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.06, "seed {seed}: mean {mean} var {var}");
        e.sort_by(f64::total_cmp);
        let ks = e
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = std_normal.cdf(v);
                (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
            })
            .fold(0.0, f64::max);
        assert!(ks < critical, "seed {seed}: KS {ks} >= {critical}");
    }
}
