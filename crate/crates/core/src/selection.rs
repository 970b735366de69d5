//! Penalized maximum-likelihood order selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{multistart_fit, EmConfig, FitResult};
use crate::likelihood::loglik_forward;
use crate::mixture::{c_term, e_term};
use crate::model::{simulate, ModelSpec};
use crate::seed::mix_seed;

/// Growth function in the `m(m+1) phi(n) log n` penalty term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiShape {
    Sqrt,
    Log,
    Constant(f64),
}

impl PhiShape {
    pub fn eval(&self, n: f64) -> f64 {
        match *self {
            PhiShape::Sqrt => n.sqrt(),
            PhiShape::Log => n.ln(),
            PhiShape::Constant(k) => k,
        }
    }
}

/// Prior scale used inside the `e_l(n)` terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tau2Choice {
    Fixed(f64),
    /// `tau^2 = 3 / (4 lambda)` with the uniform `lambda = 1/l`.
    Uniform,
}

impl Tau2Choice {
    pub fn for_order(&self, l: usize) -> f64 {
        match *self {
            Tau2Choice::Fixed(t) => t,
            Tau2Choice::Uniform => 0.75 * l as f64,
        }
    }
}

/// Source of the `lambda_i sigma_i` products entering `e_l(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSigmaPolicy {
    /// `lambda_i = 1/l`, `sigma_i^2 = sigma2_upper`.
    UniformUpper,
    /// Stationary law and variances of the fitted `l`-state model.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub rho: f64,
    pub phi: PhiShape,
    pub tau2: Tau2Choice,
    pub lambda_sigma: LambdaSigmaPolicy,
    /// Upper variance bound used by the uniform-upper policy.
    pub sigma2_upper: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            rho: 3.0,
            phi: PhiShape::Sqrt,
            tau2: Tau2Choice::Fixed(1.0),
            lambda_sigma: LambdaSigmaPolicy::UniformUpper,
            sigma2_upper: 1e4,
        }
    }
}

impl PenaltyConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.rho > 2.0) {
            return Err(Error::Config(format!("rho must exceed 2, got {}", self.rho)));
        }
        if let PhiShape::Constant(k) = self.phi {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(Error::Config(format!("phi constant must be finite and non-negative, got {k}")));
            }
        }
        if let Tau2Choice::Fixed(t) = self.tau2 {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("tau2 must be positive, got {t}")));
            }
        }
        if !(self.sigma2_upper > 0.0) || !self.sigma2_upper.is_finite() {
            return Err(Error::Config(format!("sigma2_upper must be positive, got {}", self.sigma2_upper)));
        }
        Ok(())
    }
}

fn uniform_upper(l: usize, sigma2_upper: f64) -> Vec<f64> {
    vec![sigma2_upper.sqrt() / l as f64; l]
}

/// `lambda_i sigma_i` of a fitted model.
pub fn plug_in_lambda_sigma(spec: &ModelSpec) -> Result<Vec<f64>> {
    let lambda = spec.stationary()?;
    Ok(lambda.iter().zip(spec.regimes()).map(|(l, r)| l * r.sigma2.sqrt()).collect())
}

/// Penalty with explicit `lambda_i sigma_i` for each order `l = 1..=m`
/// (`lambda_sigma[l - 1]` has `l` entries).
pub fn penalty_with(n: usize, m: usize, config: &PenaltyConfig, lambda_sigma: &[Vec<f64>]) -> Result<f64> {
    config.check()?;
    if n < 4 {
        return Err(Error::OutOfRange(format!("penalty needs n >= 4, got {n}")));
    }
    if m == 0 {
        return Err(Error::OutOfRange("penalty needs m >= 1".into()));
    }
    if lambda_sigma.len() < m || (1..=m).any(|l| lambda_sigma[l - 1].len() != l) {
        return Err(Error::Structure(format!("need lambda*sigma vectors for orders 1..={m}")));
    }
    let nf = n as f64;
    let ln_n = nf.ln();
    let mut total = 0.0;
    for l in 1..=m {
        let lf = l as f64;
        total += 0.5 * (lf * (lf + 1.0) + config.rho) * ln_n;
        total += c_term(l, n);
        total += e_term(l, n, config.tau2.for_order(l), &lambda_sigma[l - 1]);
    }
    let mf = m as f64;
    total += mf * (mf + 1.0) * config.phi.eval(nf) * ln_n;
    Ok(total)
}

/// Penalty as a deterministic function of `(n, m)`; needs the uniform-upper policy.
pub fn penalty(n: usize, m: usize, config: &PenaltyConfig) -> Result<f64> {
    if config.lambda_sigma != LambdaSigmaPolicy::UniformUpper {
        return Err(Error::Config("the plug-in policy needs fitted models; use penalty_with".into()));
    }
    let ls: Vec<Vec<f64>> = (1..=m).map(|l| uniform_upper(l, config.sigma2_upper)).collect();
    penalty_with(n, m, config, &ls)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaxOrder {
    Fixed(usize),
    /// Grow `m` until the criterion has risen for two consecutive orders.
    Auto,
}

impl std::str::FromStr for MaxOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(MaxOrder::Auto);
        }
        match s.parse::<usize>() {
            Ok(m) if m >= 1 => Ok(MaxOrder::Fixed(m)),
            _ => Err(format!("expected a positive integer or 'auto', got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderRow {
    pub m: usize,
    pub loglik: f64,
    pub penalty: f64,
    pub criterion: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub m_hat: usize,
    pub rows: Vec<OrderRow>,
    /// Largest order attempted.
    pub m_max: usize,
    pub auto: bool,
    /// Fits in the same order as `rows`.
    pub fits: Vec<FitResult>,
    /// Orders whose fit failed, with the reason.
    pub excluded: Vec<(usize, String)>,
}

impl SelectionResult {
    pub fn chosen(&self) -> &FitResult {
        let idx = self.rows.iter().position(|r| r.m == self.m_hat).expect("m_hat has a row");
        &self.fits[idx]
    }
}

/// Order with the smallest criterion; ties go to the smaller order.
pub fn argmin_order(rows: &[OrderRow]) -> Option<usize> {
    let mut best: Option<&OrderRow> = None;
    for r in rows {
        match best {
            Some(b) if !(r.criterion < b.criterion || (r.criterion == b.criterion && r.m < b.m)) => {}
            _ => best = Some(r),
        }
    }
    best.map(|r| r.m)
}

fn rising_twice(rows: &[OrderRow]) -> bool {
    match rows {
        [.., a, b, c] => b.criterion > a.criterion && c.criterion > b.criterion,
        _ => false,
    }
}

pub fn select_order(
    traj: &crate::model::Trajectory,
    max_order: MaxOrder,
    em: &EmConfig,
    pen: &PenaltyConfig,
) -> Result<SelectionResult> {
    em.check()?;
    pen.check()?;
    let n = traj.len();
    let guard = em.min_obs_per_state.max(1);
    let limit = match max_order {
        MaxOrder::Fixed(m) => {
            if m == 0 {
                return Err(Error::OutOfRange("m_max must be at least 1".into()));
            }
            if n < guard * m {
                return Err(Error::InsufficientData(format!(
                    "{n} observations cannot support m_max = {m}; need at least {}",
                    guard * m
                )));
            }
            m
        }
        MaxOrder::Auto => n / guard,
    };
    if limit == 0 {
        return Err(Error::InsufficientData(format!("{n} observations; need at least {guard}")));
    }

    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut excluded = Vec::new();
    let mut plug_in: Vec<Vec<f64>> = Vec::new();
    let mut consecutive_failures = 0;
    let mut m_max = 0;
    for m in 1..=limit {
        m_max = m;
        let fit = match multistart_fit(traj, m, em) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("order {m} excluded: {e}");
                excluded.push((m, e.to_string()));
                consecutive_failures += 1;
                if pen.lambda_sigma == LambdaSigmaPolicy::PlugIn {
                    // no fitted model to plug in beyond this point
                    break;
                }
                if max_order == MaxOrder::Auto && consecutive_failures >= 2 {
                    break;
                }
                continue;
            }
        };
        consecutive_failures = 0;
        let penalty = match pen.lambda_sigma {
            LambdaSigmaPolicy::UniformUpper => penalty(n, m, pen)?,
            LambdaSigmaPolicy::PlugIn => {
                plug_in.push(plug_in_lambda_sigma(&fit.spec)?);
                penalty_with(n, m, pen, &plug_in)?
            }
        };
        rows.push(OrderRow {
            m,
            loglik: fit.loglik,
            penalty,
            criterion: -fit.loglik + penalty,
            iterations: fit.iterations,
            converged: fit.converged,
        });
        fits.push(fit);
        if max_order == MaxOrder::Auto && rising_twice(&rows) {
            break;
        }
    }
    let m_hat = argmin_order(&rows).ok_or_else(|| {
        Error::FitFailure(format!(
            "every order failed: {}",
            excluded.iter().map(|(m, e)| format!("m = {m}: {e}")).collect::<Vec<_>>().join("; ")
        ))
    })?;
    Ok(SelectionResult { m_hat, rows, m_max, auto: max_order == MaxOrder::Auto, fits, excluded })
}

/// Block count for the KL-rate standard error.
pub const KL_BLOCKS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub rate: f64,
    pub std_error: f64,
}

/// Per-observation log-likelihood ratio of `spec0` over `spec` on data from
/// `spec0`, averaged over independent blocks of length `n` started at `y0 = 0`.
pub fn kl_rate_estimate(spec0: &ModelSpec, spec: &ModelSpec, n: usize, seed: u64) -> Result<KlEstimate> {
    if n == 0 {
        return Err(Error::OutOfRange("n must be positive".into()));
    }
    let blocks: Vec<f64> = (0..KL_BLOCKS)
        .map(|b| {
            let t = simulate(spec0, n, 0.0, mix_seed(seed, b as u64))?;
            Ok((loglik_forward(spec0, &t)? - loglik_forward(spec, &t)?) / n as f64)
        })
        .collect::<Result<_>>()?;
    let bf = KL_BLOCKS as f64;
    let rate = blocks.iter().sum::<f64>() / bf;
    let var = blocks.iter().map(|v| (v - rate).powi(2)).sum::<f64>() / (bf - 1.0);
    Ok(KlEstimate { rate, std_error: (var / bf).sqrt() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub replication: usize,
    pub sim_seed: u64,
    pub fit_seed: u64,
    pub m_hat: Option<usize>,
    /// `(m, loglik, penalty)` per fitted order.
    pub orders: Vec<(usize, f64, f64)>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudySummary {
    pub n: usize,
    pub replications: usize,
    pub p_under: f64,
    pub p_exact: f64,
    pub p_over: f64,
    pub p_fail: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub m0: usize,
    pub detail: Vec<StudyRow>,
    pub summary: Vec<StudySummary>,
    /// `P(m_hat = m0)` never decreases along the n grid.
    pub exact_rate_nondecreasing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub em: EmConfig,
    pub penalty: PenaltyConfig,
    pub max_order: MaxOrder,
    pub base_seed: u64,
    pub y0: f64,
}

/// Simulation and fitting seeds of one replication.
pub fn study_seeds(base: u64, n: usize, r: usize) -> (u64, u64) {
    let per_n = mix_seed(base, n as u64);
    (mix_seed(per_n, 2 * r as u64), mix_seed(per_n, 2 * r as u64 + 1))
}

fn replicate(true_spec: &ModelSpec, cfg: &StudyConfig, n: usize, r: usize) -> StudyRow {
    let (sim_seed, fit_seed) = study_seeds(cfg.base_seed, n, r);
    let em = EmConfig { seed: fit_seed, ..cfg.em };
    let outcome =
        simulate(true_spec, n, cfg.y0, sim_seed).and_then(|t| select_order(&t, cfg.max_order, &em, &cfg.penalty));
    match outcome {
        Ok(sel) => StudyRow {
            n,
            replication: r,
            sim_seed,
            fit_seed,
            m_hat: Some(sel.m_hat),
            orders: sel.rows.iter().map(|row| (row.m, row.loglik, row.penalty)).collect(),
            failure: None,
        },
        Err(e) => {
            log::warn!("n = {n}, replication {r} failed: {e}");
            StudyRow {
                n,
                replication: r,
                sim_seed,
                fit_seed,
                m_hat: None,
                orders: Vec::new(),
                failure: Some(e.to_string()),
            }
        }
    }
}

pub fn mc_consistency_study(true_spec: &ModelSpec, cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.em.check()?;
    cfg.penalty.check()?;
    if cfg.replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    if cfg.n_grid.is_empty() || cfg.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("n_grid must be non-empty and strictly ascending, got {:?}", cfg.n_grid)));
    }
    let m0 = true_spec.m();
    let mut detail = Vec::new();
    let mut summary = Vec::new();
    for &n in &cfg.n_grid {
        let rows: Vec<StudyRow> =
            (0..cfg.replications).into_par_iter().map(|r| replicate(true_spec, cfg, n, r)).collect();
        let reps = cfg.replications as f64;
        let count =
            |pred: &dyn Fn(usize) -> bool| rows.iter().filter(|row| row.m_hat.is_some_and(pred)).count() as f64 / reps;
        let failures = rows.iter().filter(|row| row.m_hat.is_none()).count();
        summary.push(StudySummary {
            n,
            replications: cfg.replications,
            p_under: count(&|m| m < m0),
            p_exact: count(&|m| m == m0),
            p_over: count(&|m| m > m0),
            p_fail: failures as f64 / reps,
            failures,
        });
        detail.extend(rows);
    }
    let exact_rate_nondecreasing = summary.windows(2).all(|w| w[1].p_exact >= w[0].p_exact);
    Ok(StudyResult { m0, detail, summary, exact_rate_nondecreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RegimeParams, TransitionMatrix};
    use approx::assert_abs_diff_eq;

    fn row(m: usize, criterion: f64) -> OrderRow {
        OrderRow { m, loglik: -criterion, penalty: 0.0, criterion, iterations: 1, converged: true }
    }

    #[test]
    fn first_summand_at_hundred() {
        let cfg = PenaltyConfig::default();
        let total = penalty(100, 1, &cfg).unwrap();
        let first = 2.5 * 100f64.ln();
        assert_abs_diff_eq!(first, 11.513, epsilon = 1e-3);
        let rest = c_term(1, 100) + e_term(1, 100, 1.0, &[100.0]) + 2.0 * 10.0 * 100f64.ln();
        assert_abs_diff_eq!(total, first + rest, epsilon = 1e-12);
    }

    #[test]
    fn penalty_increases_in_m() {
        for phi in [PhiShape::Sqrt, PhiShape::Log, PhiShape::Constant(0.0)] {
            let cfg = PenaltyConfig { phi, ..Default::default() };
            for n in [100, 1000, 10_000] {
                for m in 1..=6 {
                    assert!(penalty(n, m + 1, &cfg).unwrap() > penalty(n, m, &cfg).unwrap());
                }
            }
        }
    }

    #[test]
    fn penalty_guards() {
        assert!(matches!(penalty(3, 1, &PenaltyConfig::default()), Err(Error::OutOfRange(_))));
        let bad = PenaltyConfig { rho: 2.0, ..Default::default() };
        assert!(matches!(penalty(100, 1, &bad), Err(Error::Config(_))));
        let plug = PenaltyConfig { lambda_sigma: LambdaSigmaPolicy::PlugIn, ..Default::default() };
        assert!(penalty(100, 1, &plug).is_err());
    }

    #[test]
    fn argmin_breaks_ties_low() {
        assert_eq!(argmin_order(&[row(1, 5.0), row(2, 5.0), row(3, 6.0)]), Some(1));
        assert_eq!(argmin_order(&[row(1, 5.0), row(2, 4.0), row(3, 4.0)]), Some(2));
        assert_eq!(argmin_order(&[]), None);
    }

    #[test]
    fn auto_stops_after_two_rises() {
        assert!(!rising_twice(&[row(1, 1.0), row(2, 2.0)]));
        assert!(rising_twice(&[row(1, 1.0), row(2, 2.0), row(3, 3.0)]));
        assert!(!rising_twice(&[row(1, 3.0), row(2, 2.0), row(3, 3.0)]));
    }

    #[test]
    fn max_order_parses() {
        assert_eq!("auto".parse::<MaxOrder>(), Ok(MaxOrder::Auto));
        assert_eq!("3".parse::<MaxOrder>(), Ok(MaxOrder::Fixed(3)));
        assert!("0".parse::<MaxOrder>().is_err());
    }

    #[test]
    fn kl_of_self_is_zero() {
        let spec = ModelSpec::new(
            vec![RegimeParams::new(-1.0, 0.2, 1.0), RegimeParams::new(1.0, -0.1, 0.5)],
            TransitionMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap(),
        )
        .unwrap();
        let k = kl_rate_estimate(&spec, &spec, 200, 1).unwrap();
        assert_eq!(k.rate, 0.0);
        assert_eq!(k.std_error, 0.0);
    }

    #[test]
    fn iid_selection_table_is_additive() {
        let spec = ModelSpec::new(vec![RegimeParams::new(0.0, 0.0, 1.0)], TransitionMatrix::identity(1)).unwrap();
        let t = simulate(&spec, 300, 0.0, 12).unwrap();
        let em = EmConfig { restarts: 3, ..Default::default() };
        let sel = select_order(&t, MaxOrder::Fixed(2), &em, &PenaltyConfig::default()).unwrap();
        assert_eq!(sel.m_hat, 1);
        assert_eq!(sel.rows.len(), 2);
        for r in &sel.rows {
            assert_eq!(r.criterion, -r.loglik + r.penalty);
        }
    }

    #[test]
    fn fixed_order_guard() {
        let t = crate::model::Trajectory::new(0.0, vec![0.0; 10]);
        let r = select_order(&t, MaxOrder::Fixed(3), &EmConfig::default(), &PenaltyConfig::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }
}
