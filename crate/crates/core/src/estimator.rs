//! Maximum-likelihood fitting for a fixed number of states.
//!
//! EM with an exact forward-backward E-step and closed-form weighted
//! least-squares M-step. The hidden chain starts from the stationary law of
//! `A`, so the transition update is not a pure ratio of expected counts; the
//! M-step accepts the count ratio only if it does not lower the expected
//! complete-data log-likelihood and otherwise backtracks toward the current
//! matrix. This keeps every iteration monotone.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::weighted_line_fit;
use crate::model::{stationary_distribution, ModelSpec, ParameterBounds, RegimeParams, Trajectory, TransitionMatrix};
use crate::numeric::gaussian_log_density;
use crate::seed::{mix_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    /// Stop when the relative log-likelihood change falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    /// Parameter box; `bounds.c` is the variance floor.
    pub bounds: ParameterBounds,
    pub transition_floor: f64,
    /// Base seed for restarts.
    pub seed: u64,
    /// Require at least this many observations per state (`n >= k m`).
    pub min_obs_per_state: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_iterations: 500,
            restarts: 10,
            bounds: ParameterBounds::default(),
            transition_floor: 1e-6,
            seed: 0,
            min_obs_per_state: 4,
        }
    }
}

impl EmConfig {
    pub fn check(&self) -> Result<()> {
        self.bounds.check()?;
        if !(self.tolerance > 0.0)
            || self.restarts == 0
            || !(self.transition_floor > 0.0)
            || self.transition_floor >= 1.0
        {
            return Err(Error::Config(format!(
                "need tolerance > 0, restarts >= 1 and 0 < transition_floor < 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub loglik: f64,
    /// Number of M-steps taken.
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every E-step, starting from the initialization.
    pub trace: Vec<f64>,
    /// Seed of the EM run that produced this fit.
    pub seed: u64,
    /// Index of the winning restart (0 for a single run).
    pub restart: usize,
}

/// Smoothed state and pair probabilities.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub m: usize,
    pub n: usize,
    /// `gamma[k * m + i] = P(x_{k+1} = i | y)`
    pub gamma: Vec<f64>,
    /// `xi[(k * m + i) * m + j] = P(x_{k+1} = i, x_{k+2} = j | y)`, `k < n - 1`
    pub xi: Vec<f64>,
    pub loglik: f64,
}

impl Posteriors {
    #[inline]
    pub fn gamma(&self, k: usize, i: usize) -> f64 {
        self.gamma[k * self.m + i]
    }

    #[inline]
    pub fn xi(&self, k: usize, i: usize, j: usize) -> f64 {
        self.xi[(k * self.m + i) * self.m + j]
    }
}

/// Forward-backward with per-step normalization.
pub fn e_step(spec: &ModelSpec, traj: &Trajectory) -> Result<Posteriors> {
    let (m, n) = (spec.m(), traj.len());
    if n == 0 {
        return Err(Error::OutOfRange("trajectory has no observations".into()));
    }
    if let Some(r) = spec.regimes().iter().find(|r| !(r.sigma2 > 0.0)) {
        return Err(Error::Domain(format!("non-positive variance {}", r.sigma2)));
    }
    let lambda = spec.stationary()?;
    let a = spec.transition().entries();

    // emission weights scaled by their per-step maximum
    let mut emit = vec![0.0; n * m];
    let mut log_shift = vec![0.0; n];
    for k in 0..n {
        let prev = traj.lagged(k);
        let row = &mut emit[k * m..(k + 1) * m];
        for (j, r) in spec.regimes().iter().enumerate() {
            row[j] = gaussian_log_density(traj.y[k], r.mean(prev), r.sigma2);
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::DegenerateObservation(k + 1));
        }
        row.iter_mut().for_each(|v| *v = (*v - mx).exp());
        log_shift[k] = mx;
    }

    let mut alpha = vec![0.0; n * m];
    let mut scale = vec![0.0; n];
    let mut loglik = 0.0;
    for k in 0..n {
        let (done, rest) = alpha.split_at_mut(k * m);
        let cur = &mut rest[..m];
        if k == 0 {
            for j in 0..m {
                cur[j] = lambda[j] * emit[j];
            }
        } else {
            let prev = &done[(k - 1) * m..];
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..m {
                    s += prev[i] * a[i * m + j];
                }
                cur[j] = s * emit[k * m + j];
            }
        }
        let c: f64 = cur.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateObservation(k + 1));
        }
        cur.iter_mut().for_each(|v| *v /= c);
        scale[k] = c;
        loglik += c.ln() + log_shift[k];
    }

    let mut beta = vec![1.0; n * m];
    for k in (0..n - 1).rev() {
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += a[i * m + j] * emit[(k + 1) * m + j] * beta[(k + 1) * m + j];
            }
            beta[k * m + i] = s / scale[k + 1];
        }
    }

    let mut gamma = vec![0.0; n * m];
    for k in 0..n {
        let mut s = 0.0;
        for i in 0..m {
            let g = alpha[k * m + i] * beta[k * m + i];
            gamma[k * m + i] = g;
            s += g;
        }
        gamma[k * m..(k + 1) * m].iter_mut().for_each(|g| *g /= s);
    }

    let mut xi = vec![0.0; n.saturating_sub(1) * m * m];
    for k in 0..n.saturating_sub(1) {
        let block = &mut xi[k * m * m..(k + 1) * m * m];
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                let v = alpha[k * m + i] * a[i * m + j] * emit[(k + 1) * m + j] * beta[(k + 1) * m + j];
                block[i * m + j] = v;
                s += v;
            }
        }
        block.iter_mut().for_each(|v| *v /= s);
    }

    Ok(Posteriors { m, n, gamma, xi, loglik })
}

fn regime_q(traj: &Trajectory, post: &Posteriors, i: usize, r: &RegimeParams) -> f64 {
    (0..post.n)
        .map(|k| {
            let g = post.gamma(k, i);
            if g == 0.0 {
                0.0
            } else {
                g * gaussian_log_density(traj.y[k], r.mean(traj.lagged(k)), r.sigma2)
            }
        })
        .sum()
}

fn transition_q(a: &TransitionMatrix, initial: &[f64], counts: &[f64]) -> f64 {
    let Ok(lambda) = stationary_distribution(a) else {
        return f64::NEG_INFINITY;
    };
    let init: f64 = initial.iter().zip(&lambda).filter(|(&g, _)| g > 0.0).map(|(g, l)| g * l.ln()).sum();
    let trans: f64 = counts.iter().zip(a.entries()).filter(|(&c, _)| c > 0.0).map(|(c, p)| c * p.ln()).sum();
    init + trans
}

fn floor_rows(m: usize, entries: &mut [f64], floor: f64) {
    for row in entries.chunks_mut(m) {
        row.iter_mut().for_each(|v| *v = v.max(floor));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// One M-step from the posteriors of `current`.
pub fn m_step(post: &Posteriors, traj: &Trajectory, current: &ModelSpec, config: &EmConfig) -> Result<ModelSpec> {
    let (m, n) = (post.m, post.n);
    if current.m() != m || traj.len() != n {
        return Err(Error::Structure("posteriors do not match the model or trajectory".into()));
    }
    let x: Vec<f64> = (0..n).map(|k| traj.lagged(k)).collect();
    let mut weights = vec![0.0; n];
    let mut regimes = Vec::with_capacity(m);
    for i in 0..m {
        for (k, w) in weights.iter_mut().enumerate() {
            *w = post.gamma(k, i);
        }
        let total: f64 = weights.iter().sum();
        if total < 2.0 {
            return Err(Error::RegimeStarvation { state: i + 1, weight: total });
        }
        let (theta, rss, total) = weighted_line_fit(&x, &traj.y, Some(&weights))
            .map_err(|reason| Error::SingularDesign { state: i + 1, reason: reason.into() })?;
        let raw = RegimeParams::new(theta[0], theta[1], rss / total);
        let projected = config.bounds.clamp(raw);
        // clamping theta can lose ground against the current value
        let old = current.regimes()[i];
        let keep_old = projected != raw && regime_q(traj, post, i, &projected) < regime_q(traj, post, i, &old);
        regimes.push(if keep_old { old } else { projected });
    }

    let mut counts = vec![0.0; m * m];
    for k in 0..n.saturating_sub(1) {
        for (c, v) in counts.iter_mut().zip(&post.xi[k * m * m..(k + 1) * m * m]) {
            *c += v;
        }
    }
    let old_a = current.transition();
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        let row = &counts[i * m..(i + 1) * m];
        let total: f64 = row.iter().sum();
        for j in 0..m {
            entries[i * m + j] = if total > 0.0 { row[j] / total } else { old_a.get(i, j) };
        }
    }
    floor_rows(m, &mut entries, config.transition_floor);
    let initial: Vec<f64> = (0..m).map(|i| post.gamma(0, i)).collect();
    let q_old = transition_q(old_a, &initial, &counts);
    let mut step = 1.0;
    let mut accepted = None;
    for _ in 0..40 {
        let blend: Vec<f64> = old_a.entries().iter().zip(&entries).map(|(o, e)| (1.0 - step) * o + step * e).collect();
        let cand = TransitionMatrix::from_row_major(m, blend)?;
        if transition_q(&cand, &initial, &counts) >= q_old {
            accepted = Some(cand);
            break;
        }
        step *= 0.5;
    }
    let transition = accepted.unwrap_or_else(|| old_a.clone());
    ModelSpec::new(regimes, transition)
}

/// Quantile-bin initialization: split observations at jittered quantiles of
/// `y`, fit each bin by least squares, then perturb every parameter by up to 10%.
pub fn initialize(traj: &Trajectory, m: usize, config: &EmConfig, seed: u64) -> Result<ModelSpec> {
    let n = traj.len();
    let mut rng = rng_from_seed(seed);
    let mut sorted = traj.y.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..m)
        .map(|j| {
            let p = ((j as f64 + rng.gen_range(-0.3..0.3)) / m as f64).clamp(0.0, 1.0);
            sorted[((p * n as f64) as usize).min(n - 1)]
        })
        .collect();
    let labels: Vec<usize> = traj.y.iter().map(|&v| cuts.iter().filter(|&&c| v >= c).count()).collect();

    let x: Vec<f64> = (0..n).map(|k| traj.lagged(k)).collect();
    let global = weighted_line_fit(&x, &traj.y, None).ok();
    let mut regimes = Vec::with_capacity(m);
    for i in 0..m {
        let w: Vec<f64> = labels.iter().map(|&l| if l == i { 1.0 } else { 0.0 }).collect();
        let count: f64 = w.iter().sum();
        let fit = if count >= 3.0 { weighted_line_fit(&x, &traj.y, Some(&w)).ok() } else { None };
        let params = match (fit, global) {
            (Some((th, rss, tot)), _) => RegimeParams::new(th[0], th[1], rss / tot),
            (None, Some((th, rss, tot))) => {
                // shift the global line to the bin's mean level
                let (sy, sx) = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == i)
                    .fold((0.0, 0.0), |(sy, sx), (k, _)| (sy + traj.y[k], sx + x[k]));
                let shift = if count > 0.0 { (sy - th[1] * sx) / count - th[0] } else { 0.0 };
                RegimeParams::new(th[0] + shift, th[1], rss / tot)
            }
            (None, None) => {
                let mean = traj.y.iter().sum::<f64>() / n as f64;
                let var = traj.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                RegimeParams::new(mean, 0.0, var)
            }
        };
        let jitter = |v: f64, rng: &mut crate::seed::Rng| v * (1.0 + rng.gen_range(-0.1..0.1));
        let jittered = RegimeParams::new(
            jitter(params.intercept, &mut rng),
            jitter(params.ar, &mut rng),
            jitter(params.sigma2, &mut rng),
        );
        regimes.push(config.bounds.clamp(jittered));
    }

    let mut entries = vec![1.0; m * m];
    for w in labels.windows(2) {
        entries[w[0] * m + w[1]] += 1.0;
    }
    floor_rows(m, &mut entries, 0.0);
    floor_rows(m, &mut entries, config.transition_floor);
    ModelSpec::new(regimes, TransitionMatrix::from_row_major(m, entries)?)
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-300)
}

/// Runs EM from a given starting point.
pub fn em_from(traj: &Trajectory, initial: ModelSpec, config: &EmConfig) -> Result<FitResult> {
    config.check()?;
    let mut spec = initial;
    let mut post = e_step(&spec, traj)?;
    let mut trace = vec![post.loglik];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        let next = m_step(&post, traj, &spec, config)?;
        let next_post = e_step(&next, traj)?;
        iterations += 1;
        let change = relative_change(next_post.loglik, post.loglik);
        trace.push(next_post.loglik);
        spec = next;
        post = next_post;
        if change < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(FitResult { spec, loglik: post.loglik, iterations, converged, trace, seed: 0, restart: 0 })
}

/// One EM run from the quantile initialization drawn with `seed`.
pub fn em_fit(traj: &Trajectory, m: usize, config: &EmConfig, seed: u64) -> Result<FitResult> {
    config.check()?;
    if m == 0 {
        return Err(Error::OutOfRange("state count must be at least 1".into()));
    }
    if traj.len() < config.min_obs_per_state * m {
        return Err(Error::InsufficientData(format!(
            "{} observations for {m} states; need at least {}",
            traj.len(),
            config.min_obs_per_state * m
        )));
    }
    let init = initialize(traj, m, config, seed)?;
    let mut fit = em_from(traj, init, config)?;
    fit.seed = seed;
    Ok(fit)
}

/// Seed of restart `r` under base seed `base`.
pub fn restart_seed(base: u64, r: usize) -> u64 {
    mix_seed(base, r as u64)
}

/// Best of `config.restarts` EM runs; ties go to the lower restart index.
pub fn multistart_fit(traj: &Trajectory, m: usize, config: &EmConfig) -> Result<FitResult> {
    config.check()?;
    let runs: Vec<Result<FitResult>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            em_fit(traj, m, config, restart_seed(config.seed, r)).map(|mut f| {
                f.restart = r;
                f
            })
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                    best = Some(fit);
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    best.ok_or_else(|| {
        Error::FitFailure(format!("all {} restarts failed for m = {m}: {}", config.restarts, failures.join("; ")))
    })
}
