#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use regime_select::likelihood::{conditional_loglik, path_prior_loglik};
use regime_select::model::{ModelSpec, RegimeParams, Trajectory, TransitionMatrix};
use regime_select::numeric::{for_each_path, log_sum_exp};
use regime_select::quadrature::integrate;
use regime_select::seed::Rng as ChaRng;

pub fn benchmark() -> ModelSpec {
    ModelSpec::new(
        vec![RegimeParams::new(-2.0, 0.3, 1.0), RegimeParams::new(2.0, -0.2, 1.0)],
        TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap(),
    )
    .unwrap()
}

/// Random valid model with strictly positive transition entries.
pub fn random_spec(m: usize, rng: &mut ChaRng) -> ModelSpec {
    ModelSpec::random(m, rng)
}

/// `log sum_paths p(path) p(y | path)` written out path by path.
pub fn joint_logs(spec: &ModelSpec, traj: &Trajectory) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    for_each_path(spec.m(), traj.len(), |p| {
        let t = Trajectory::with_path(traj.y0, traj.y.clone(), p.to_vec()).unwrap();
        let v = path_prior_loglik(spec.transition(), p).unwrap() + conditional_loglik(spec.regimes(), &t).unwrap();
        out.push((p.to_vec(), v));
    });
    out
}

/// Smoothed marginals `P(x_k = i | y)` by enumeration, row-major `n x m`.
pub fn brute_posteriors(spec: &ModelSpec, traj: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (spec.m(), traj.len());
    let joint = joint_logs(spec, traj);
    let total = log_sum_exp(&joint.iter().map(|(_, v)| *v).collect::<Vec<_>>());
    let mut gamma = vec![0.0; n * m];
    let mut xi = vec![0.0; n.saturating_sub(1) * m * m];
    for (path, v) in &joint {
        let w = (v - total).exp();
        for k in 0..n {
            gamma[k * m + path[k]] += w;
        }
        for k in 0..n.saturating_sub(1) {
            xi[(k * m + path[k]) * m + path[k + 1]] += w;
        }
    }
    (gamma, xi)
}

/// Solves `(X'X) theta = X'y` for the design `[1, x]` by explicit inversion.
pub fn normal_equations(x: &[f64], y: &[f64]) -> [f64; 2] {
    let n = x.len();
    let design = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r] });
    let resp = DVector::from_column_slice(y);
    let gram = design.transpose() * &design;
    let theta = gram.try_inverse().expect("invertible Gram") * design.transpose() * resp;
    [theta[0], theta[1]]
}

/// `log int prod_j p_j^{n_j} Dir(1/2, 1/2)(dp)` for a two-state row, by
/// quadrature after `p = sin^2 t`, which removes the endpoint singularities.
pub fn beta_row_integral(n1: usize, n2: usize) -> f64 {
    let f = |t: f64| {
        let (s, c) = (t.sin(), t.cos());
        2.0 / std::f64::consts::PI * s.powi(2 * n1 as i32) * c.powi(2 * n2 as i32)
    };
    integrate(f, 0.0, std::f64::consts::FRAC_PI_2, 1e-13, 0.0, 2000).unwrap().value.ln()
}

/// Two-state KT mixture by per-row quadrature, with the uniform initial factor.
pub fn kt_two_state_oracle(path: &[usize]) -> f64 {
    let mut counts = [[0usize; 2]; 2];
    for w in path.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    -(2f64.ln()) + beta_row_integral(counts[0][0], counts[0][1]) + beta_row_integral(counts[1][0], counts[1][1])
}

pub fn random_line_data(n: usize, rng: &mut ChaRng) -> (Vec<f64>, Vec<f64>) {
    let b = rng.gen_range(-3.0..3.0);
    let a = rng.gen_range(-0.9..0.9);
    let s = rng.gen_range(0.2..2.0);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let y: Vec<f64> = x.iter().map(|&v| b + a * v + s * (rng.gen::<f64>() - 0.5) * 3.4).collect();
    (x, y)
}
