//! Exact likelihood of an AR-MR trajectory.
//!
//! Everything here conditions on `Y_0 = y_0`. The hidden chain starts from
//! its stationary law, so `p_A(x) = lambda_{x_1} prod_k a_{x_k x_{k+1}}`.
//! All arithmetic stays in natural-log space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, RegimeParams, Trajectory, TransitionMatrix};
use crate::numeric::{for_each_path, gaussian_log_density, path_count, LogSumExp, LN_2PI};

/// Upper limit on `m^n` for exhaustive path enumeration.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Condition-number ceiling for `W_i^t W_i` in [`ols_fit`].
pub const MAX_DESIGN_CONDITION: f64 = 1e12;

fn check_variances(regimes: &[RegimeParams]) -> Result<()> {
    match regimes.iter().position(|r| !(r.sigma2 > 0.0) || !r.sigma2.is_finite()) {
        Some(i) => Err(Error::Domain(format!("sigma2 of state {} is {}, must be positive", i + 1, regimes[i].sigma2))),
        None => Ok(()),
    }
}

/// `log p(y_1..y_n | y_0, x_1..x_n)` for the path stored in `traj`.
pub fn conditional_loglik(regimes: &[RegimeParams], traj: &Trajectory) -> Result<f64> {
    check_variances(regimes)?;
    let path = traj.path_checked(regimes.len())?;
    conditional_loglik_on(regimes, traj, path)
}

pub(crate) fn conditional_loglik_on(regimes: &[RegimeParams], traj: &Trajectory, path: &[usize]) -> Result<f64> {
    let m = regimes.len();
    let mut visits = vec![0usize; m];
    let mut rss = vec![0.0; m];
    for (k, &s) in path.iter().enumerate() {
        let r = traj.y[k] - regimes[s].mean(traj.lagged(k));
        visits[s] += 1;
        rss[s] += r * r;
    }
    Ok((0..m)
        .filter(|&i| visits[i] > 0)
        .map(|i| {
            let s2 = regimes[i].sigma2;
            -0.5 * visits[i] as f64 * (LN_2PI + s2.ln()) - rss[i] / (2.0 * s2)
        })
        .sum())
}

/// `log p_A(x_1..x_n)` with `x_1` drawn from the stationary law of `a`.
/// A zero-probability step yields `-inf`.
pub fn path_prior_loglik(a: &TransitionMatrix, path: &[usize]) -> Result<f64> {
    let lambda = crate::model::stationary_distribution(a)?;
    path_prior_with(a, &lambda, path)
}

fn path_prior_with(a: &TransitionMatrix, lambda: &[f64], path: &[usize]) -> Result<f64> {
    let m = a.m();
    if let Some(&s) = path.iter().find(|&&s| s >= m) {
        return Err(Error::Domain(format!("state label {} is outside 1..{m}", s + 1)));
    }
    let Some(&first) = path.first() else {
        return Ok(0.0);
    };
    let mut lp = lambda[first].ln();
    for w in path.windows(2) {
        lp += a.get(w[0], w[1]).ln();
    }
    Ok(lp)
}

/// `log p_psi(y_1..y_n | y_0)` by the forward recursion in log space.
pub fn loglik_forward(spec: &ModelSpec, traj: &Trajectory) -> Result<f64> {
    check_variances(spec.regimes())?;
    if traj.is_empty() {
        return Err(Error::OutOfRange("trajectory has no observations".into()));
    }
    let lambda = spec.stationary()?;
    let m = spec.m();
    let log_a: Vec<f64> = spec.transition().entries().iter().map(|a| a.ln()).collect();
    let emit = |k: usize, j: usize| {
        let r = &spec.regimes()[j];
        gaussian_log_density(traj.y[k], r.mean(traj.lagged(k)), r.sigma2)
    };

    let mut alpha: Vec<f64> = (0..m).map(|j| lambda[j].ln() + emit(0, j)).collect();
    let mut next = vec![0.0; m];
    let mut terms = vec![0.0; m];
    for k in 1..traj.len() {
        for (j, slot) in next.iter_mut().enumerate() {
            for i in 0..m {
                terms[i] = alpha[i] + log_a[i * m + j];
            }
            *slot = crate::numeric::log_sum_exp(&terms) + emit(k, j);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    Ok(crate::numeric::log_sum_exp(&alpha))
}

/// `log p_psi(y_1..y_n | y_0)` as an explicit sum over all `m^n` paths.
pub fn loglik_bruteforce(spec: &ModelSpec, traj: &Trajectory) -> Result<f64> {
    check_variances(spec.regimes())?;
    let (m, n) = (spec.m(), traj.len());
    if path_count(m, n, BRUTE_FORCE_LIMIT).is_none() {
        return Err(Error::SizeGuard { states: m, len: n, limit: BRUTE_FORCE_LIMIT });
    }
    let lambda = spec.stationary()?.to_vec();
    let mut acc = LogSumExp::default();
    let mut failure = None;
    for_each_path(m, n, |path| {
        let joint = conditional_loglik_on(spec.regimes(), traj, path)
            .and_then(|c| Ok(c + path_prior_with(spec.transition(), &lambda, path)?));
        match joint {
            Ok(v) => acc.push(v),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(acc.value()),
    }
}

/// Observations assigned to one state along a path.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Visit times `k` (1-based, as in `x_1..x_n`).
    pub times: Vec<usize>,
    /// `n_i x 2` design: a column of ones and the lagged values `y_{k-1}`.
    pub design: DMatrix<f64>,
    /// `y_k` for `k` in `times`.
    pub response: DVector<f64>,
}

impl Segment {
    #[inline]
    pub fn len(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-state visit sets, counts and regression data for a fixed path.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub m: usize,
    pub n: usize,
    pub segments: Vec<Segment>,
    /// `n_ij` row-major, counted over consecutive pairs `(x_k, x_{k+1})`.
    pub transitions: Vec<usize>,
}

impl SegmentStats {
    #[inline]
    pub fn visits(&self, i: usize) -> usize {
        self.segments[i].len()
    }

    #[inline]
    pub fn transition_count(&self, i: usize, j: usize) -> usize {
        self.transitions[i * self.m + j]
    }

    /// `n_i. = sum_j n_ij`
    pub fn row_total(&self, i: usize) -> usize {
        self.transitions[i * self.m..(i + 1) * self.m].iter().sum()
    }
}

pub fn segment_stats(traj: &Trajectory, m: usize) -> Result<SegmentStats> {
    let path = traj.path_checked(m)?;
    segment_stats_on(traj, path, m)
}

pub(crate) fn segment_stats_on(traj: &Trajectory, path: &[usize], m: usize) -> Result<SegmentStats> {
    if let Some(&s) = path.iter().find(|&&s| s >= m) {
        return Err(Error::Domain(format!("state label {} is outside 1..{m}", s + 1)));
    }
    let mut times: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (k, &s) in path.iter().enumerate() {
        times[s].push(k + 1);
    }
    let mut transitions = vec![0usize; m * m];
    for w in path.windows(2) {
        transitions[w[0] * m + w[1]] += 1;
    }
    let segments = times
        .into_iter()
        .map(|times| {
            let ni = times.len();
            let design = DMatrix::from_fn(ni, 2, |r, c| if c == 0 { 1.0 } else { traj.lagged(times[r] - 1) });
            let response = DVector::from_iterator(ni, times.iter().map(|&t| traj.y[t - 1]));
            Segment { times, design, response }
        })
        .collect();
    Ok(SegmentStats { m, n: path.len(), segments, transitions })
}

/// Closed-form least-squares fit of one regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeFit {
    /// `(intercept, slope)`
    pub theta: [f64; 2],
    /// `RSS / n_i`, not floored.
    pub sigma2: f64,
    pub rss: f64,
    pub n: usize,
}

impl RegimeFit {
    /// Parameters with the variance floored at `c`.
    pub fn params(&self, c: f64) -> RegimeParams {
        RegimeParams::new(self.theta[0], self.theta[1], self.sigma2.max(c))
    }
}

/// Weighted simple regression of `y` on `(1, x)`. Weights must be non-negative.
pub(crate) fn weighted_line_fit(
    x: &[f64],
    y: &[f64],
    w: Option<&[f64]>,
) -> std::result::Result<([f64; 2], f64, f64), &'static str> {
    let weight = |k: usize| w.map_or(1.0, |w| w[k]);
    let total: f64 = (0..x.len()).map(weight).sum();
    if !(total > 0.0) {
        return Err("no weight");
    }
    let mut mx = 0.0;
    let mut my = 0.0;
    for k in 0..x.len() {
        mx += weight(k) * x[k];
        my += weight(k) * y[k];
    }
    mx /= total;
    my /= total;
    let (mut sxx, mut sxy, mut sum_sq) = (0.0, 0.0, 0.0);
    for k in 0..x.len() {
        let dx = x[k] - mx;
        sxx += weight(k) * dx * dx;
        sxy += weight(k) * dx * (y[k] - my);
        sum_sq += weight(k) * x[k] * x[k];
    }
    // eigenvalues of the 2x2 weighted Gram matrix [[W, W mx], [W mx, sum w x^2]]
    let (a, b, d) = (total, total * mx, sum_sq);
    let tr = a + d;
    let det = a * d - b * b;
    let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
    let lo = if det > 0.0 { det / (0.5 * (tr + disc)) } else { 0.0 };
    let hi = 0.5 * (tr + disc);
    if !(sxx > 0.0) || !(lo > 0.0) || hi / lo > MAX_DESIGN_CONDITION {
        return Err("lagged values are (numerically) constant");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = (0..x.len())
        .map(|k| {
            let r = y[k] - intercept - slope * x[k];
            weight(k) * r * r
        })
        .sum();
    Ok(([intercept, slope], rss, total))
}

/// Maximum-likelihood `(theta_i, sigma2_i)` for each state given the path.
pub fn ols_fit(stats: &SegmentStats) -> Result<Vec<RegimeFit>> {
    (0..stats.m).map(|i| fit_segment(stats, i)).collect()
}

pub fn fit_segment(stats: &SegmentStats, i: usize) -> Result<RegimeFit> {
    let seg = &stats.segments[i];
    if seg.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "state {} has {} observation(s), need at least 2",
            i + 1,
            seg.len()
        )));
    }
    let x: Vec<f64> = seg.design.column(1).iter().copied().collect();
    let y: Vec<f64> = seg.response.iter().copied().collect();
    let (theta, rss, _) = weighted_line_fit(&x, &y, None)
        .map_err(|reason| Error::SingularDesign { state: i + 1, reason: reason.into() })?;
    Ok(RegimeFit { theta, sigma2: rss / seg.len() as f64, rss, n: seg.len() })
}

/// `|l(psi) - l(psi')| / (n ||psi - psi'||_inf)`.
pub fn lipschitz_probe(spec: &ModelSpec, other: &ModelSpec, traj: &Trajectory) -> Result<f64> {
    let dist = spec.distance(other)?;
    if !(dist > 0.0) {
        return Err(Error::Domain("parameter vectors coincide; ratio undefined".into()));
    }
    let a = loglik_forward(spec, traj)?;
    let b = loglik_forward(other, traj)?;
    Ok((a - b).abs() / (traj.len() as f64 * dist))
}
