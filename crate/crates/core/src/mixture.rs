//! The prior-mixture statistic `q_m` and the terms of its comparison bound.
//!
//! `q_m(y) = sum_x q_m(y | y_0, x) q_m(x)` where
//!
//! * `q_m(x)` integrates the path law against independent Dirichlet(1/2, ..., 1/2)
//!   rows of the transition matrix, with a uniform initial state;
//! * `q_m(y | y_0, x)` integrates each regime's Gaussian regression against a
//!   `N(0, sigma2 tau2 I)` prior on `(b, alpha)` and the non-informative limit
//!   of an inverse-gamma prior on `sigma2`.
//!
//! Closed forms are checked against exhaustive enumeration and nested
//! adaptive quadrature.

use log::info;
use nalgebra::{DMatrix, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::likelihood::{loglik_forward, segment_stats_on, Segment, SegmentStats, BRUTE_FORCE_LIMIT};
use crate::model::{ModelSpec, Trajectory, TransitionMatrix};
use crate::numeric::{for_each_path, ln_gamma, path_count, LogSumExp, LN_2PI};
use crate::quadrature::integrate;

const LN_GAMMA_HALF: f64 = 0.572_364_942_924_700_1; // ln sqrt(pi)

/// Hyper-parameters of the conjugate prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Prior variance scale of `(b, alpha)` relative to `sigma2`.
    pub tau2: f64,
    /// Inverse-gamma scale; only the quadrature oracle uses it.
    pub u0: f64,
    /// Inverse-gamma shape; only the quadrature oracle uses it.
    pub v0: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { tau2: 1.0, u0: 0.0, v0: 0.0 }
    }
}

impl PriorConfig {
    pub fn with_tau2(tau2: f64) -> Self {
        Self { tau2, ..Self::default() }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::Domain(format!("tau2 must be positive, got {}", self.tau2)));
        }
        if !(self.u0 >= 0.0 && self.v0 >= 0.0) {
            return Err(Error::Domain("u0 and v0 must be non-negative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Path mixture
// ---------------------------------------------------------------------------

/// `log q_m(x_1..x_n)`: Dirichlet(1/2) mixture over each transition row,
/// uniform initial state.
pub fn kt_path_mixture_log(path: &[usize], m: usize) -> Result<f64> {
    let counts = transition_counts(path, m)?;
    let half_m = 0.5 * m as f64;
    let mut total = -(m as f64).ln();
    for i in 0..m {
        let row = &counts[i * m..(i + 1) * m];
        let n_row: usize = row.iter().sum();
        if n_row == 0 {
            continue;
        }
        total += ln_gamma(half_m) - ln_gamma(n_row as f64 + half_m);
        total += row.iter().map(|&c| ln_gamma(c as f64 + 0.5) - LN_GAMMA_HALF).sum::<f64>();
    }
    Ok(total)
}

fn transition_counts(path: &[usize], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Domain("state count must be positive".into()));
    }
    if let Some(&s) = path.iter().find(|&&s| s >= m) {
        return Err(Error::Domain(format!("state label {} is outside 1..{m}", s + 1)));
    }
    let mut counts = vec![0usize; m * m];
    for w in path.windows(2) {
        counts[w[0] * m + w[1]] += 1;
    }
    Ok(counts)
}

/// Row frequencies `n_ij / n_i.`; rows of unvisited states are uniform.
pub fn empirical_transition_matrix(path: &[usize], m: usize) -> Result<TransitionMatrix> {
    let counts = transition_counts(path, m)?;
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        let row = &counts[i * m..(i + 1) * m];
        let total: usize = row.iter().sum();
        for j in 0..m {
            entries[i * m + j] = if total == 0 { 1.0 / m as f64 } else { row[j] as f64 / total as f64 };
        }
    }
    TransitionMatrix::from_row_major(m, entries)
}

// ---------------------------------------------------------------------------
// Bound constants
// ---------------------------------------------------------------------------

/// `c_m(n) = max{0, log m - m (log Gamma(m/2)/Gamma(1/2) - m(m-1)/(4n) + 1/(12n))}`.
pub fn c_term(m: usize, n: usize) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let inner = mf.ln() - mf * (ln_gamma(0.5 * mf) - LN_GAMMA_HALF - mf * (mf - 1.0) / (4.0 * nf) + 1.0 / (12.0 * nf));
    inner.max(0.0)
}

/// `d(n) = n/2 + log(n/2)/2`.
pub fn d_term(n: usize) -> f64 {
    let nf = n as f64;
    0.5 * nf + 0.5 * (0.5 * nf).ln()
}

/// `e_m(n) = max{0, (m/2) log(1/n^2 + (tau^4/m) sum_i (lambda_i sigma_i)^2) - m log(2 pi)/2}`.
pub fn e_term(m: usize, n: usize, tau2: f64, lambda_sigma: &[f64]) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let ss: f64 = lambda_sigma.iter().map(|v| v * v).sum();
    let inner = 0.5 * mf * (1.0 / (nf * nf) + tau2 * tau2 / mf * ss).ln() - 0.5 * mf * LN_2PI;
    inner.max(0.0)
}

/// Right-hand side of the likelihood-to-mixture comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// `m(m+1)/2 log n`
    pub leading: f64,
    pub c_m: f64,
    pub d: f64,
    pub e_m: f64,
    /// `(n m / 2) log ratio_max`
    pub ratio_term: f64,
    pub rhs_total: f64,
}

pub fn bound_terms(n: usize, m: usize, tau2: f64, lambda_sigma: &[f64], ratio_max: f64) -> Result<BoundTerms> {
    if n < 4 {
        return Err(Error::OutOfRange(format!("bound needs n >= 4, got {n}")));
    }
    if m == 0 || lambda_sigma.len() != m {
        return Err(Error::Structure(format!("{} lambda*sigma values for m = {m}", lambda_sigma.len())));
    }
    if !(ratio_max >= 1.0) {
        return Err(Error::Domain(format!("ratio_max must be at least 1, got {ratio_max}")));
    }
    let (mf, nf) = (m as f64, n as f64);
    let leading = 0.5 * mf * (mf + 1.0) * nf.ln();
    let c_m = c_term(m, n);
    let d = d_term(n);
    let e_m = e_term(m, n, tau2, lambda_sigma);
    let ratio_term = 0.5 * nf * mf * ratio_max.ln();
    Ok(BoundTerms { leading, c_m, d, e_m, ratio_term, rhs_total: leading + c_m + d + e_m + ratio_term })
}

// ---------------------------------------------------------------------------
// Projections
// ---------------------------------------------------------------------------

/// `M_i`, `P_i` and `B_i` for one state.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `(W^t W + tau^-2 I)^-1`
    pub ridge_inverse: DMatrix<f64>,
    /// `I - W M W^t`
    pub p: DMatrix<f64>,
    /// `I - W (W^t W)^-1 W^t`; `None` when `W^t W` is singular.
    pub b: Option<DMatrix<f64>>,
}

impl Projection {
    pub fn new(seg: &Segment, tau2: f64) -> Self {
        let w = &seg.design;
        let n = w.nrows();
        let gram = w.transpose() * w;
        let ridge_inverse =
            (&gram + DMatrix::identity(2, 2) / tau2).try_inverse().expect("ridge Gram matrix is positive definite");
        let p = DMatrix::identity(n, n) - w * &ridge_inverse * w.transpose();
        let b = if n >= 2 {
            gram.clone().cholesky().map(|c| DMatrix::identity(n, n) - w * c.inverse() * w.transpose())
        } else {
            None
        };
        Self { ridge_inverse, p, b }
    }
}

/// Projection matrices for every state along a fixed path.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub states: Vec<Projection>,
}

impl ProjectionSet {
    pub fn new(stats: &SegmentStats, tau2: f64) -> Self {
        Self { states: stats.segments.iter().map(|s| Projection::new(s, tau2)).collect() }
    }

    /// `(Y'PY, Y'BY)` for state `i`.
    pub fn quadratic_forms(&self, stats: &SegmentStats, i: usize) -> (f64, Option<f64>) {
        let y = &stats.segments[i].response;
        let proj = &self.states[i];
        let yp = (y.transpose() * &proj.p * y)[(0, 0)];
        let yb = proj.b.as_ref().map(|b| (y.transpose() * b * y)[(0, 0)]);
        (yp, yb)
    }
}

// ---------------------------------------------------------------------------
// Conditional marginal
// ---------------------------------------------------------------------------

/// Sufficient statistics of one regression segment.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sx: f64,
    sxx: f64,
    sy: f64,
    sxy: f64,
    syy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.sx += x;
        self.sxx += x * x;
        self.sy += y;
        self.sxy += x * y;
        self.syy += y * y;
    }

    fn ridge_gram(&self, tau2: f64) -> Matrix2<f64> {
        Matrix2::new(self.n as f64 + 1.0 / tau2, self.sx, self.sx, self.sxx + 1.0 / tau2)
    }

    fn wty(&self) -> Vector2<f64> {
        Vector2::new(self.sy, self.sxy)
    }
}

fn segment_moments(traj: &Trajectory, path: &[usize], m: usize) -> Vec<Moments> {
    let mut out = vec![Moments::default(); m];
    for (k, &s) in path.iter().enumerate() {
        out[s].push(traj.lagged(k), traj.y[k]);
    }
    out
}

/// `log` of one state's factor in `q_m(y | y_0, x)`:
/// `log det(M)/2 - (n_i/2) log 2pi - log tau2 - (n_i/2) log(Y'PY) + (n_i/2) log 2 + log Gamma(n_i/2)`.
fn state_marginal(mo: &Moments, tau2: f64, state: usize) -> Result<f64> {
    let g = mo.ridge_gram(tau2);
    let det_g = g.determinant();
    let wty = mo.wty();
    let ridge_fit = g
        .try_inverse()
        .map(|gi| wty.dot(&(gi * wty)))
        .ok_or(Error::DegenerateQuadratic { state: state + 1, value: f64::NAN })?;
    let q = mo.syy - ridge_fit;
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::DegenerateQuadratic { state: state + 1, value: q });
    }
    let half_n = 0.5 * mo.n as f64;
    Ok(-0.5 * det_g.ln() - half_n * LN_2PI - tau2.ln() - half_n * q.ln()
        + half_n * std::f64::consts::LN_2
        + ln_gamma(half_n))
}

/// `log q_m(y_1..y_n | y_0, x_1..x_n)` for the path stored in `traj`.
/// Unvisited states contribute nothing.
pub fn conditional_mixture_log(traj: &Trajectory, m: usize, prior: &PriorConfig) -> Result<f64> {
    prior.check()?;
    let path = traj.path_checked(m)?;
    conditional_mixture_on(traj, path, m, prior.tau2)
}

pub(crate) fn conditional_mixture_on(traj: &Trajectory, path: &[usize], m: usize, tau2: f64) -> Result<f64> {
    segment_moments(traj, path, m)
        .iter()
        .enumerate()
        .filter(|(_, mo)| mo.n > 0)
        .map(|(i, mo)| state_marginal(mo, tau2, i))
        .sum()
}

/// `log q_m(y_1..y_n | y_0)` by summing over every path.
pub fn mixture_bruteforce_log(traj: &Trajectory, m: usize, prior: &PriorConfig) -> Result<f64> {
    prior.check()?;
    let n = traj.len();
    if path_count(m, n, BRUTE_FORCE_LIMIT).is_none() {
        return Err(Error::SizeGuard { states: m, len: n, limit: BRUTE_FORCE_LIMIT });
    }
    let mut acc = LogSumExp::default();
    let mut failure = None;
    for_each_path(m, n, |path| {
        let term =
            conditional_mixture_on(traj, path, m, prior.tau2).and_then(|c| Ok(c + kt_path_mixture_log(path, m)?));
        match term {
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

// ---------------------------------------------------------------------------
// Quadrature oracle
// ---------------------------------------------------------------------------

const ORACLE_MAX_N: usize = 6;
const ORACLE_MAX_M: usize = 2;
const ORACLE_INNER_TOL: f64 = 1e-11;
const ORACLE_WINDOW_SD: f64 = 12.0;

/// `log q_m(y | y_0, x)` by nested adaptive quadrature over `(b, alpha, sigma2)`
/// for every visited state, with the inverse-gamma kernel
/// `sigma2^-(1 + v0/2) exp(-u0 / (2 sigma2))` (the normalizing constant is
/// dropped so the `u0, v0 -> 0` limit exists).
///
/// Integration runs over `log sigma2` and over `(b, alpha)` windows of
/// twelve posterior standard deviations around the ridge solution.
pub fn mixture_numeric_oracle(traj: &Trajectory, m: usize, prior: &PriorConfig, rel_tol: f64) -> Result<f64> {
    prior.check()?;
    if !(prior.u0 > 0.0 && prior.v0 > 0.0) {
        return Err(Error::Domain("the quadrature oracle needs u0 > 0 and v0 > 0".into()));
    }
    if traj.len() > ORACLE_MAX_N || m > ORACLE_MAX_M {
        return Err(Error::SizeGuard {
            states: m,
            len: traj.len(),
            limit: (ORACLE_MAX_M as u64).pow(ORACLE_MAX_N as u32),
        });
    }
    let path = traj.path_checked(m)?;
    let mut total = 0.0;
    for state in 0..m {
        let points: Vec<(f64, f64)> =
            path.iter().enumerate().filter(|(_, &s)| s == state).map(|(k, _)| (traj.lagged(k), traj.y[k])).collect();
        if !points.is_empty() {
            total += state_oracle(&points, prior, rel_tol)
                .ok_or_else(|| Error::OracleFailure(format!("state {} did not converge", state + 1)))?;
        }
    }
    Ok(total)
}

fn state_oracle(points: &[(f64, f64)], prior: &PriorConfig, rel_tol: f64) -> Option<f64> {
    let n = points.len() as f64;
    let tau2 = prior.tau2;
    let (u0, v0) = (prior.u0, prior.v0);

    // log integrand in (b, alpha, s = log sigma2), including the ds Jacobian
    let log_f = |b: f64, a: f64, s: f64| {
        let var = s.exp();
        let rss: f64 = points.iter().map(|&(x, y)| (y - b - a * x).powi(2)).sum();
        -0.5 * n * (LN_2PI + s)
            - rss / (2.0 * var)
            - (LN_2PI + s + tau2.ln())
            - (b * b + a * a) / (2.0 * var * tau2)
            - (1.0 + 0.5 * v0) * s
            - u0 / (2.0 * var)
            + s
    };

    // window placement: ridge solution and its precision
    let (mut g11, mut g12, mut g22, mut r1, mut r2) = (1.0 / tau2, 0.0, 1.0 / tau2, 0.0, 0.0);
    for &(x, y) in points {
        g11 += 1.0;
        g12 += x;
        g22 += x * x;
        r1 += y;
        r2 += x * y;
    }
    let det = g11 * g22 - g12 * g12;
    let b_star = (g22 * r1 - g12 * r2) / det;
    let a_star = (g11 * r2 - g12 * r1) / det;
    let q_min: f64 = points.iter().map(|&(x, y)| (y - b_star - a_star * x).powi(2)).sum::<f64>()
        + (b_star * b_star + a_star * a_star) / tau2;
    let s_star = ((q_min + u0) / (n + v0)).ln();
    let reference = log_f(b_star, a_star, s_star);
    let marg_b = g22 / det; // (G^-1)_11

    let inner = |s: f64| -> f64 {
        let var = s.exp();
        let sd_b = (var * marg_b).sqrt();
        let sd_a_cond = (var / g22).sqrt();
        let outer_b = |b: f64| -> f64 {
            let centre = a_star - g12 / g22 * (b - b_star);
            integrate(
                |a| (log_f(b, a, s) - reference).exp(),
                centre - ORACLE_WINDOW_SD * sd_a_cond,
                centre + ORACLE_WINDOW_SD * sd_a_cond,
                ORACLE_INNER_TOL,
                0.0,
                400,
            )
            .map_or(f64::NAN, |e| e.value)
        };
        integrate(
            outer_b,
            b_star - ORACLE_WINDOW_SD * sd_b,
            b_star + ORACLE_WINDOW_SD * sd_b,
            ORACLE_INNER_TOL,
            0.0,
            400,
        )
        .map_or(f64::NAN, |e| e.value)
    };
    // right tail decays like exp(-s (n + v0) / 2)
    let upper = s_star + 15.0 + 120.0 / (n + v0);
    let est = integrate(inner, s_star - 15.0, upper, rel_tol, 0.0, 2000)?;
    (est.value > 0.0).then(|| reference + est.value.ln())
}

// ---------------------------------------------------------------------------
// Bound verification
// ---------------------------------------------------------------------------

/// Outcome of checking `log p_psi(y) - log q_m(y) <= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub loglik: f64,
    pub log_mixture: f64,
    pub lhs: f64,
    pub terms: BoundTerms,
    pub ratio_max: f64,
    pub slack: f64,
    /// Paths skipped in the ratio maximum because some visited state had a
    /// singular `B_i` quadratic form.
    pub excluded_paths: u64,
}

/// Largest `Y'PY / Y'BY` over all paths and visited states, with the number
/// of paths excluded for a degenerate `B_i`.
pub fn ratio_max_over_paths(traj: &Trajectory, m: usize, tau2: f64) -> Result<(f64, u64)> {
    let n = traj.len();
    if path_count(m, n, BRUTE_FORCE_LIMIT).is_none() {
        return Err(Error::SizeGuard { states: m, len: n, limit: BRUTE_FORCE_LIMIT });
    }
    let mut best = f64::NEG_INFINITY;
    let mut excluded = 0u64;
    let mut failure = None;
    for_each_path(m, n, |path| {
        let stats = match segment_stats_on(traj, path, m) {
            Ok(s) => s,
            Err(e) => {
                failure.get_or_insert(e);
                return;
            }
        };
        let proj = ProjectionSet::new(&stats, tau2);
        let mut path_max = f64::NEG_INFINITY;
        for i in 0..m {
            let ni = stats.visits(i);
            if ni == 0 {
                continue;
            }
            let (yp, yb) = proj.quadratic_forms(&stats, i);
            match yb {
                Some(yb) if ni >= 3 && yb > 1e-12 * yp.max(f64::MIN_POSITIVE) => {
                    path_max = path_max.max(yp / yb);
                }
                _ => {
                    excluded += 1;
                    return;
                }
            }
        }
        best = best.max(path_max);
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !best.is_finite() {
        return Err(Error::Domain("every path has a degenerate B quadratic form".into()));
    }
    Ok((best, excluded))
}

/// Evaluates both sides of the comparison between the likelihood of `spec`
/// and `q_m`, with `lambda_i sigma_i` taken from `spec`.
pub fn verify_bound(spec: &ModelSpec, traj: &Trajectory, prior: &PriorConfig) -> Result<BoundReport> {
    prior.check()?;
    let (m, n) = (spec.m(), traj.len());
    if n < 4 {
        return Err(Error::OutOfRange(format!("bound needs n >= 4, got {n}")));
    }
    let loglik = loglik_forward(spec, traj)?;
    let log_mixture = mixture_bruteforce_log(traj, m, prior)?;
    let (ratio_max, excluded_paths) = ratio_max_over_paths(traj, m, prior.tau2)?;
    if excluded_paths > 0 {
        info!("{excluded_paths} path(s) excluded from the ratio maximum (degenerate B quadratic form)");
    }
    let lambda = spec.stationary()?;
    let lambda_sigma: Vec<f64> = lambda.iter().zip(spec.regimes()).map(|(l, r)| l * r.sigma2.sqrt()).collect();
    let terms = bound_terms(n, m, prior.tau2, &lambda_sigma, ratio_max.max(1.0))?;
    let lhs = loglik - log_mixture;
    Ok(BoundReport { loglik, log_mixture, lhs, terms, ratio_max, slack: terms.rhs_total - lhs, excluded_paths })
}

/// Slack in `log p_A(x) - log q_m(x) <= (m(m-1)/2) log n + c_m(n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KtBoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// `p_A(x)` is the transition likelihood `prod a_{x_k x_{k+1}}` with the
/// initial state taken as known, which is its maximum over initial laws.
pub fn kt_bound_check(path: &[usize], m: usize, a: &TransitionMatrix) -> Result<KtBoundCheck> {
    if a.m() != m {
        return Err(Error::Structure(format!("{}x{} matrix for m = {m}", a.m(), a.m())));
    }
    let counts = transition_counts(path, m)?;
    let log_pa: f64 = counts.iter().zip(a.entries()).filter(|(&c, _)| c > 0).map(|(&c, &p)| c as f64 * p.ln()).sum();
    let lhs = log_pa - kt_path_mixture_log(path, m)?;
    let n = path.len().max(1);
    let rhs = 0.5 * (m * (m - 1)) as f64 * (n as f64).ln() + c_term(m, n);
    Ok(KtBoundCheck { lhs, rhs, slack: rhs - lhs })
}
