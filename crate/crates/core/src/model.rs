//! The AR-MR model family.
//!
//! An observation follows `y_k = alpha_{x_k} y_{k-1} + b_{x_k} + sigma_{x_k} e_k`
//! with `e_k` i.i.d. standard normal and `x_k` a homogeneous Markov chain on
//! `m` states. States are 0-based in memory; file formats use 1-based labels.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, Rng};

/// Tolerance on row sums of a transition matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    #[serde(rename = "b")]
    pub intercept: f64,
    #[serde(rename = "alpha")]
    pub ar: f64,
    pub sigma2: f64,
}

impl RegimeParams {
    pub fn new(intercept: f64, ar: f64, sigma2: f64) -> Self {
        Self { intercept, ar, sigma2 }
    }

    /// Conditional mean of `y_k` given `y_{k-1}`.
    #[inline]
    pub fn mean(&self, prev: f64) -> f64 {
        self.intercept + self.ar * prev
    }
}

/// The compact parameter box: `sigma2 in [c, d]`, `|b| <= b_max`, `|alpha| <= alpha_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParameterBounds {
    pub c: f64,
    pub d: f64,
    pub b_max: f64,
    pub alpha_max: f64,
}

impl Default for ParameterBounds {
    fn default() -> Self {
        Self { c: 1e-4, d: 1e4, b_max: 100.0, alpha_max: 10.0 }
    }
}

impl ParameterBounds {
    pub fn check(&self) -> Result<()> {
        if !(self.c > 0.0 && self.d >= self.c && self.b_max > 0.0 && self.alpha_max > 0.0) {
            return Err(Error::Config(format!("bounds need 0 < c <= d and positive box limits, got {self:?}")));
        }
        Ok(())
    }

    pub fn clamp(&self, p: RegimeParams) -> RegimeParams {
        RegimeParams {
            intercept: p.intercept.clamp(-self.b_max, self.b_max),
            ar: p.ar.clamp(-self.alpha_max, self.alpha_max),
            sigma2: p.sigma2.clamp(self.c, self.d),
        }
    }
}

/// Row-stochastic `m x m` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    /// Builds from rows; only checks the shape.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::Structure("transition matrix has no rows".into()));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(Error::Structure(format!("transition row {} has {} entries, expected {m}", i + 1, r.len())));
        }
        Ok(Self { m, entries: rows.concat() })
    }

    pub fn from_row_major(m: usize, entries: Vec<f64>) -> Result<Self> {
        if m == 0 || entries.len() != m * m {
            return Err(Error::Structure(format!("{} entries do not form a {m}x{m} matrix", entries.len())));
        }
        Ok(Self { m, entries })
    }

    pub fn identity(m: usize) -> Self {
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            entries[i * m + i] = 1.0;
        }
        Self { m, entries }
    }

    pub fn uniform(m: usize) -> Self {
        Self { m, entries: vec![1.0 / m as f64; m * m] }
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    /// `(row, sum)` of the first row whose entries are negative or do not sum to one.
    pub fn stochastic_defect(&self) -> Option<(usize, f64)> {
        (0..self.m).find_map(|i| {
            let r = self.row(i);
            let s: f64 = r.iter().sum();
            let bad = r.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) || (s - 1.0).abs() > ROW_SUM_TOL;
            bad.then_some((i, s))
        })
    }

    fn support(&self) -> Vec<bool> {
        self.entries.iter().map(|&a| a > 0.0).collect()
    }

    fn bool_product(a: &[bool], b: &[bool], m: usize) -> Vec<bool> {
        let mut out = vec![false; m * m];
        for i in 0..m {
            for k in 0..m {
                if a[i * m + k] {
                    for j in 0..m {
                        out[i * m + j] |= b[k * m + j];
                    }
                }
            }
        }
        out
    }

    pub fn is_irreducible(&self) -> bool {
        let m = self.m;
        // transitive closure of the support graph
        let mut reach = self.support();
        for k in 0..m {
            for i in 0..m {
                if reach[i * m + k] {
                    for j in 0..m {
                        if reach[k * m + j] {
                            reach[i * m + j] = true;
                        }
                    }
                }
            }
        }
        reach.iter().all(|&r| r)
    }

    /// Primitivity test; for an irreducible matrix this is aperiodicity.
    /// Uses Wielandt's exponent `(m-1)^2 + 1`.
    pub fn is_primitive(&self) -> bool {
        let m = self.m;
        let base = self.support();
        let mut power = base.clone();
        for _ in 1..((m - 1) * (m - 1) + 1) {
            power = Self::bool_product(&power, &base, m);
        }
        power.iter().all(|&p| p)
    }

    /// Relabel states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.m;
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                entries[i * m + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { m, entries }
    }
}

/// Solves `lambda A = lambda`, `sum lambda = 1` as a linear system.
pub fn stationary_distribution(a: &TransitionMatrix) -> Result<Vec<f64>> {
    if let Some((row, sum)) = a.stochastic_defect() {
        return Err(Error::Domain(format!("row {} is not a probability vector (sum {sum})", row + 1)));
    }
    if !a.is_irreducible() {
        return Err(Error::NoUniqueStationary("reducible chain"));
    }
    if !a.is_primitive() {
        return Err(Error::NoUniqueStationary("periodic chain"));
    }
    let m = a.m();
    // (A^T - I) lambda = 0 with the last equation replaced by normalization.
    let mut sys = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            sys[(i, j)] = a.get(j, i) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..m {
        sys[(m - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m);
    rhs[m - 1] = 1.0;
    let sol = sys.lu().solve(&rhs).ok_or(Error::NoUniqueStationary("singular stationary system"))?;
    // clip round-off and renormalize
    let mut lambda: Vec<f64> = sol.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = lambda.iter().sum();
    lambda.iter_mut().for_each(|v| *v /= total);
    Ok(lambda)
}

/// A full parameter vector `(theta, sigma2, A)` with `m` states.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    regimes: Vec<RegimeParams>,
    transition: TransitionMatrix,
    stationary: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn new(regimes: Vec<RegimeParams>, transition: TransitionMatrix) -> Result<Self> {
        if regimes.len() != transition.m() {
            return Err(Error::Structure(format!(
                "{} regimes but a {}x{} transition matrix",
                regimes.len(),
                transition.m(),
                transition.m()
            )));
        }
        let stationary = stationary_distribution(&transition).ok();
        Ok(Self { regimes, transition, stationary })
    }

    /// Checks the declared state count against the regimes and matrix.
    pub fn with_declared_states(m: usize, regimes: Vec<RegimeParams>, transition: TransitionMatrix) -> Result<Self> {
        if m != regimes.len() {
            return Err(Error::Structure(format!("m = {m} but {} regimes given", regimes.len())));
        }
        Self::new(regimes, transition)
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.regimes.len()
    }

    #[inline]
    pub fn regimes(&self) -> &[RegimeParams] {
        &self.regimes
    }

    #[inline]
    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn stationary(&self) -> Result<&[f64]> {
        match &self.stationary {
            Some(l) => Ok(l),
            None => Err(stationary_distribution(&self.transition)
                .err()
                .unwrap_or(Error::NoUniqueStationary("stationary solve failed"))),
        }
    }

    /// Relabel states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.m();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Domain(format!("{perm:?} is not a permutation of {m} states")));
        }
        Self::new(perm.iter().map(|&p| self.regimes[p]).collect(), self.transition.permuted(perm))
    }

    /// Max-norm distance over every parameter entry.
    pub fn distance(&self, other: &ModelSpec) -> Result<f64> {
        if self.m() != other.m() {
            return Err(Error::Structure(format!("cannot compare {} and {} states", self.m(), other.m())));
        }
        let regime = self.regimes.iter().zip(&other.regimes).fold(0.0_f64, |acc, (a, b)| {
            acc.max((a.intercept - b.intercept).abs()).max((a.ar - b.ar).abs()).max((a.sigma2 - b.sigma2).abs())
        });
        let trans = self
            .transition
            .entries()
            .iter()
            .zip(other.transition.entries())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        Ok(regime.max(trans))
    }

    /// A random valid model: `b ~ U(-2, 2)`, `alpha ~ U(-0.9, 0.9)`,
    /// `sigma2 ~ U(0.25, 2)`, every transition entry at least `0.05 / m`.
    pub fn random(m: usize, rng: &mut Rng) -> Self {
        let regimes = (0..m)
            .map(|_| RegimeParams::new(rng.gen_range(-2.0..2.0), rng.gen_range(-0.9..0.9), rng.gen_range(0.25..2.0)))
            .collect();
        let mut entries = Vec::with_capacity(m * m);
        for _ in 0..m {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            entries.extend(raw.iter().map(|r| r / s));
        }
        let transition = TransitionMatrix::from_row_major(m, entries).expect("square");
        Self::new(regimes, transition).expect("dimensions agree")
    }
}

/// A named assumption failure reported by [`validate_model`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowStochastic { row: usize, sum: f64 },
    Irreducibility,
    Aperiodicity,
    VarianceBounds { state: usize, sigma2: f64 },
    ParameterBox { state: usize, intercept: f64, ar: f64 },
    Stability { index: f64 },
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::RowStochastic { .. } => "row-stochastic",
            Violation::Irreducibility => "irreducibility",
            Violation::Aperiodicity => "aperiodicity",
            Violation::VarianceBounds { .. } => "variance-bounds",
            Violation::ParameterBox { .. } => "parameter-box",
            Violation::Stability { .. } => "stability",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        match self {
            Violation::RowStochastic { row, sum } => {
                write!(f, "{name}: row {} sums to {sum} or has a negative entry", row + 1)
            }
            Violation::Irreducibility => write!(f, "{name}: chain is reducible"),
            Violation::Aperiodicity => write!(f, "{name}: chain is periodic"),
            Violation::VarianceBounds { state, sigma2 } => {
                write!(f, "{name}: sigma2 of state {} is {sigma2}", state + 1)
            }
            Violation::ParameterBox { state, intercept, ar } => {
                write!(f, "{name}: state {} has (b, alpha) = ({intercept}, {ar})", state + 1)
            }
            Violation::Stability { index } => {
                write!(f, "{name}: sum lambda_i log|alpha_i| = {index} is not negative")
            }
        }
    }
}

/// Checks row-stochasticity, irreducibility, aperiodicity, the variance
/// interval, the parameter box and the stability index. Empty means valid.
pub fn validate_model(spec: &ModelSpec, bounds: &ParameterBounds) -> Vec<Violation> {
    let mut out = Vec::new();
    let a = spec.transition();
    if let Some((row, sum)) = a.stochastic_defect() {
        out.push(Violation::RowStochastic { row, sum });
    }
    let irreducible = a.is_irreducible();
    if !irreducible {
        out.push(Violation::Irreducibility);
    } else if !a.is_primitive() {
        out.push(Violation::Aperiodicity);
    }
    for (state, r) in spec.regimes().iter().enumerate() {
        if !(r.sigma2 >= bounds.c && r.sigma2 <= bounds.d) {
            out.push(Violation::VarianceBounds { state, sigma2: r.sigma2 });
        }
        if !(r.intercept.abs() <= bounds.b_max && r.ar.abs() <= bounds.alpha_max) {
            out.push(Violation::ParameterBox { state, intercept: r.intercept, ar: r.ar });
        }
    }
    if out.is_empty() {
        if let Ok(index) = stability_index(spec) {
            if !(index < 0.0) {
                out.push(Violation::Stability { index });
            }
        }
    }
    out
}

/// `sum_i lambda_i log|alpha_i|`; `-inf` when a visited regime has `alpha_i = 0`.
pub fn stability_index(spec: &ModelSpec) -> Result<f64> {
    let lambda = spec.stationary()?;
    Ok(lambda
        .iter()
        .zip(spec.regimes())
        .filter(|(&l, _)| l > 0.0)
        .map(|(&l, r)| if r.ar == 0.0 { f64::NEG_INFINITY } else { l * r.ar.abs().ln() })
        .sum())
}

/// Observed series `y_0..y_n` with an optional hidden path `x_1..x_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub y0: f64,
    /// `y_1..y_n`
    pub y: Vec<f64>,
    /// 0-based states for `x_1..x_n`
    pub path: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn new(y0: f64, y: Vec<f64>) -> Self {
        Self { y0, y, path: None }
    }

    pub fn with_path(y0: f64, y: Vec<f64>, path: Vec<usize>) -> Result<Self> {
        if path.len() != y.len() {
            return Err(Error::Structure(format!("path has {} states for {} observations", path.len(), y.len())));
        }
        Ok(Self { y0, y, path: Some(path) })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `y_{k-1}` for the 0-based observation index `k` (i.e. time `k + 1`).
    #[inline]
    pub fn lagged(&self, k: usize) -> f64 {
        if k == 0 {
            self.y0
        } else {
            self.y[k - 1]
        }
    }

    /// Truncate to the first `n` observations.
    pub fn prefix(&self, n: usize) -> Trajectory {
        Trajectory { y0: self.y0, y: self.y[..n].to_vec(), path: self.path.as_ref().map(|p| p[..n].to_vec()) }
    }

    pub fn path_checked(&self, m: usize) -> Result<&[usize]> {
        let path = self.path.as_deref().ok_or_else(|| Error::Domain("trajectory carries no hidden path".into()))?;
        if let Some((k, &s)) = path.iter().enumerate().find(|(_, &s)| s >= m) {
            return Err(Error::Domain(format!("state label {} at time {} is outside 1..{m}", s + 1, k + 1)));
        }
        Ok(path)
    }
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Simulates `n` steps from `y_0`, with `x_1` drawn from the stationary law.
pub fn simulate(spec: &ModelSpec, n: usize, y0: f64, seed: u64) -> Result<Trajectory> {
    simulate_with_bounds(spec, &ParameterBounds::default(), n, y0, seed)
}

pub fn simulate_with_bounds(
    spec: &ModelSpec,
    bounds: &ParameterBounds,
    n: usize,
    y0: f64,
    seed: u64,
) -> Result<Trajectory> {
    let violations = validate_model(spec, bounds);
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations));
    }
    if n == 0 {
        return Err(Error::OutOfRange("simulation length must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let lambda = spec.stationary()?;
    let sd: Vec<f64> = spec.regimes().iter().map(|r| r.sigma2.sqrt()).collect();
    let mut y = Vec::with_capacity(n);
    let mut path = Vec::with_capacity(n);
    let mut prev = y0;
    let mut state = sample_categorical(lambda, rng.gen::<f64>());
    for k in 0..n {
        if k > 0 {
            state = sample_categorical(spec.transition().row(state), rng.gen::<f64>());
        }
        let e: f64 = rng.sample(StandardNormal);
        let r = &spec.regimes()[state];
        let next = r.mean(prev) + sd[state] * e;
        y.push(next);
        path.push(state);
        prev = next;
    }
    Ok(Trajectory { y0, y, path: Some(path) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_state(alpha: f64) -> ModelSpec {
        ModelSpec::new(vec![RegimeParams::new(0.0, alpha, 1.0)], TransitionMatrix::identity(1)).unwrap()
    }

    fn tm(rows: &[&[f64]]) -> TransitionMatrix {
        TransitionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_state_half_ar_is_valid() {
        assert!(validate_model(&one_state(0.5), &ParameterBounds::default()).is_empty());
    }

    #[test]
    fn unit_root_fails_stability() {
        let v = validate_model(&one_state(1.0), &ParameterBounds::default());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].name(), "stability");
    }

    #[test]
    fn identity_two_state_is_reducible() {
        let regimes = vec![RegimeParams::new(0.0, 0.5, 1.0); 2];
        let spec = ModelSpec::new(regimes, TransitionMatrix::identity(2)).unwrap();
        let v = validate_model(&spec, &ParameterBounds::default());
        assert!(v.iter().any(|x| x.name() == "irreducibility"));
    }

    #[test]
    fn single_violations_are_named() {
        let b = ParameterBounds::default();
        let base = || vec![RegimeParams::new(0.0, 0.5, 1.0), RegimeParams::new(1.0, -0.5, 2.0)];
        let a = tm(&[&[0.9, 0.1], &[0.2, 0.8]]);

        let mut r = base();
        r[1].sigma2 = 1e-6;
        let v = validate_model(&ModelSpec::new(r, a.clone()).unwrap(), &b);
        assert_eq!(v.iter().map(Violation::name).collect::<Vec<_>>(), ["variance-bounds"]);

        let mut r = base();
        r[0].intercept = 150.0;
        let v = validate_model(&ModelSpec::new(r, a.clone()).unwrap(), &b);
        assert_eq!(v.iter().map(Violation::name).collect::<Vec<_>>(), ["parameter-box"]);

        let bad = tm(&[&[0.9, 0.2], &[0.2, 0.8]]);
        let v = validate_model(&ModelSpec::new(base(), bad).unwrap(), &b);
        assert_eq!(v.iter().map(Violation::name).collect::<Vec<_>>(), ["row-stochastic"]);

        let periodic = tm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let v = validate_model(&ModelSpec::new(base(), periodic).unwrap(), &b);
        assert_eq!(v.iter().map(Violation::name).collect::<Vec<_>>(), ["aperiodicity"]);

        // explosive on average: lambda = (2/3, 1/3), alphas 2 and 0.9
        let mut r = base();
        r[0].ar = 2.0;
        r[1].ar = 0.9;
        let v = validate_model(&ModelSpec::new(r, a).unwrap(), &b);
        assert_eq!(v.iter().map(Violation::name).collect::<Vec<_>>(), ["stability"]);
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let err = ModelSpec::new(vec![RegimeParams::new(0.0, 0.5, 1.0)], TransitionMatrix::uniform(2));
        assert!(matches!(err, Err(Error::Structure(_))));
        let err = TransitionMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0]]);
        assert!(matches!(err, Err(Error::Structure(_))));
        let err =
            ModelSpec::with_declared_states(3, vec![RegimeParams::new(0.0, 0.5, 1.0)], TransitionMatrix::identity(1));
        assert!(matches!(err, Err(Error::Structure(_))));
    }

    #[test]
    fn stationary_examples() {
        assert_eq!(stationary_distribution(&TransitionMatrix::identity(1)).unwrap(), vec![1.0]);
        let l = stationary_distribution(&TransitionMatrix::uniform(2)).unwrap();
        assert_abs_diff_eq!(l[0], 0.5, epsilon = 1e-15);
        // 0.1 l1 = 0.2 l2
        let l = stationary_distribution(&tm(&[&[0.9, 0.1], &[0.2, 0.8]])).unwrap();
        assert_abs_diff_eq!(l[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_rejects_reducible_and_periodic() {
        assert!(matches!(stationary_distribution(&TransitionMatrix::identity(2)), Err(Error::NoUniqueStationary(_))));
        assert!(matches!(stationary_distribution(&tm(&[&[0.0, 1.0], &[1.0, 0.0]])), Err(Error::NoUniqueStationary(_))));
    }

    #[test]
    fn stability_examples() {
        assert_abs_diff_eq!(stability_index(&one_state(0.5)).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        assert_eq!(stability_index(&one_state(1.0)).unwrap(), 0.0);
        assert_eq!(stability_index(&one_state(0.0)).unwrap(), f64::NEG_INFINITY);
        let spec = ModelSpec::new(
            vec![RegimeParams::new(0.0, 0.5, 1.0), RegimeParams::new(0.0, 1.5, 1.0)],
            tm(&[&[0.9, 0.1], &[0.2, 0.8]]),
        )
        .unwrap();
        let expected = (2.0 / 3.0) * 0.5f64.ln() + (1.0 / 3.0) * 1.5f64.ln();
        assert_abs_diff_eq!(stability_index(&spec).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, -0.3270, epsilon = 1e-4);
    }

    #[test]
    fn white_noise_moments() {
        let spec = one_state(0.0);
        let n = 10_000;
        let t = simulate(&spec, n, 0.0, 11).unwrap();
        let mean = t.y.iter().sum::<f64>() / n as f64;
        let var = t.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn simulate_is_deterministic() {
        let spec = ModelSpec::random(3, &mut rng_from_seed(4));
        let a = simulate(&spec, 500, 0.3, 99).unwrap();
        let b = simulate(&spec, 500, 0.3, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate(&spec, 500, 0.3, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn symmetric_chain_visits_equally() {
        let spec = ModelSpec::new(
            vec![RegimeParams::new(-1.0, 0.2, 1.0), RegimeParams::new(1.0, 0.2, 1.0)],
            tm(&[&[0.9, 0.1], &[0.1, 0.9]]),
        )
        .unwrap();
        let t = simulate(&spec, 10_000, 0.0, 5).unwrap();
        let frac = t.path.unwrap().iter().filter(|&&s| s == 0).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.05, "frac {frac}");
    }

    #[test]
    fn simulate_rejects_invalid() {
        assert!(matches!(simulate(&one_state(1.0), 10, 0.0, 1), Err(Error::InvalidModel(_))));
        assert!(matches!(simulate(&one_state(0.5), 0, 0.0, 1), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn permutation_relabels_stationary() {
        let spec = ModelSpec::new(
            vec![RegimeParams::new(-1.0, 0.2, 1.0), RegimeParams::new(1.0, 0.2, 1.0)],
            tm(&[&[0.9, 0.1], &[0.2, 0.8]]),
        )
        .unwrap();
        let p = spec.permuted(&[1, 0]).unwrap();
        assert_abs_diff_eq!(p.stationary().unwrap()[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(p.regimes()[0], spec.regimes()[1]);
        assert!(spec.permuted(&[0, 0]).is_err());
    }
}
