use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::Serialize;

use regime_select::error::{Error, Result};
use regime_select::estimator::{multistart_fit, restart_seed, EmConfig};
use regime_select::io::{
    fmt_f64, metadata_path, optional_seed_as_string, read_model_config, read_study, read_trajectory, seed_as_string,
    study_detail_csv, study_summary_csv, trajectory_csv, write_atomic, ModelConfig, RunMetadata,
};
use regime_select::likelihood::BRUTE_FORCE_LIMIT;
use regime_select::mixture::{verify_bound, PriorConfig};
use regime_select::model::{simulate_with_bounds, ModelSpec, ParameterBounds};
use regime_select::numeric::path_count;
use regime_select::seed::{mix_seed, rng_from_seed, GENERATOR};
use regime_select::selection::{
    mc_consistency_study, select_order, LambdaSigmaPolicy, MaxOrder, PenaltyConfig, PhiShape, Tau2Choice,
};

#[derive(Debug, Parser)]
#[command(
    name = "regime-select",
    version,
    about = "Markov-regime autoregression: simulate, fit, select the number of states"
)]
pub struct Cli {
    /// Only report errors on standard error.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trajectory from a model config.
    Simulate(SimulateArgs),
    /// Fit a model with a fixed number of states.
    Fit(FitArgs),
    /// Choose the number of states by penalized likelihood.
    Select(SelectArgs),
    /// Check the likelihood-to-mixture inequality on random small instances.
    VerifyBound(VerifyArgs),
    /// Run a Monte Carlo order-selection study.
    McStudy(StudyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(short, long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub y0: f64,
    #[arg(long, default_value_t = 0)]
    #[serde(serialize_with = "seed_as_string")]
    pub seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmArgs {
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Relative log-likelihood change that ends EM.
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub transition_floor: f64,
    /// Require n >= k m before fitting m states.
    #[arg(long, default_value_t = 4)]
    pub min_obs_per_state: usize,
    /// Variance floor c.
    #[arg(long, default_value_t = 1e-4)]
    pub variance_floor: f64,
    /// Variance ceiling d.
    #[arg(long, default_value_t = 1e4)]
    pub variance_ceiling: f64,
}

impl EmArgs {
    fn config(&self, seed: u64) -> Result<EmConfig> {
        let bounds = ParameterBounds { c: self.variance_floor, d: self.variance_ceiling, ..ParameterBounds::default() };
        let cfg = EmConfig {
            tolerance: self.tol,
            max_iterations: self.max_iter,
            restarts: self.restarts,
            bounds,
            transition_floor: self.transition_floor,
            seed,
            min_obs_per_state: self.min_obs_per_state,
        };
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short = 'm', long)]
    pub states: usize,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long, default_value_t = 0)]
    #[serde(serialize_with = "seed_as_string")]
    pub seed: u64,
    /// Fitted model config; printed after the report when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiArg {
    Sqrt,
    Log,
    Constant,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSigmaArg {
    UniformUpper,
    PlugIn,
}

fn parse_rho(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 2.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("rho must exceed 2".into())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Largest order to fit, or `auto`.
    #[arg(long, default_value = "auto")]
    pub m_max: MaxOrder,
    #[arg(long, default_value = "3", value_parser = parse_rho)]
    pub rho: f64,
    #[arg(long, value_enum, default_value_t = PhiArg::Sqrt)]
    pub phi: PhiArg,
    /// Value of phi when `--phi constant`.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub tau2: f64,
    /// Use tau^2 = 3l/4 for order l instead of `--tau2`.
    #[arg(long)]
    pub tau2_uniform: bool,
    #[arg(long, value_enum, default_value_t = LambdaSigmaArg::UniformUpper)]
    pub lambda_sigma: LambdaSigmaArg,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long, default_value_t = 0)]
    #[serde(serialize_with = "seed_as_string")]
    pub seed: u64,
    /// Per-order table CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config file for the chosen model.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

impl SelectArgs {
    fn penalty(&self) -> Result<PenaltyConfig> {
        let phi = match (self.phi, self.kappa) {
            (PhiArg::Sqrt, None) => PhiShape::Sqrt,
            (PhiArg::Log, None) => PhiShape::Log,
            (PhiArg::Constant, Some(k)) => PhiShape::Constant(k),
            (PhiArg::Constant, None) => return Err(Error::Config("--phi constant needs --kappa".into())),
            (_, Some(_)) => return Err(Error::Config("--kappa only applies to --phi constant".into())),
        };
        let cfg = PenaltyConfig {
            rho: self.rho,
            phi,
            tau2: if self.tau2_uniform { Tau2Choice::Uniform } else { Tau2Choice::Fixed(self.tau2) },
            lambda_sigma: match self.lambda_sigma {
                LambdaSigmaArg::UniformUpper => LambdaSigmaPolicy::UniformUpper,
                LambdaSigmaArg::PlugIn => LambdaSigmaPolicy::PlugIn,
            },
            sigma2_upper: self.em.variance_ceiling,
        };
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub n_min: usize,
    #[arg(long, default_value_t = 8)]
    pub n_max: usize,
    #[arg(long, default_value_t = 1)]
    pub m_min: usize,
    #[arg(long, default_value_t = 2)]
    pub m_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau2: f64,
    #[arg(long, default_value_t = 0)]
    #[serde(serialize_with = "seed_as_string")]
    pub seed: u64,
    /// Slack table CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StudyArgs {
    /// Study config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for `detail.csv`, `summary.csv` and `study.meta.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `base_seed` from the config.
    #[arg(long)]
    #[serde(serialize_with = "optional_seed_as_string")]
    pub seed: Option<u64>,
}

struct Output {
    quiet: bool,
}

impl Output {
    fn info(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

fn metadata(command: &str, config: &impl Serialize, seeds: Vec<u64>, started: Instant) -> RunMetadata {
    RunMetadata {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        generator: GENERATOR.into(),
        seeds: seeds.into_iter().map(|s| s.to_string()).collect(),
        duration_seconds: started.elapsed().as_secs_f64(),
        config: toml::Value::try_from(config).expect("arguments serialize"),
    }
}

/// Writes `contents` to `out` (plus its metadata sidecar) or to standard output.
fn emit(out: Option<&Path>, contents: &str, meta: impl FnOnce() -> RunMetadata) -> Result<()> {
    match out {
        Some(path) => {
            write_atomic(path, contents.as_bytes())?;
            write_atomic(&metadata_path(path), meta().to_toml().as_bytes())
        }
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("REGIME_SELECT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("REGIME_SELECT_THREADS must be a non-negative integer, got '{raw}'")))?;
    if threads > 0 {
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let out = Output { quiet: cli.quiet };
    let started = Instant::now();
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a, started),
        Command::Fit(a) => fit_cmd(a, &out, started),
        Command::Select(a) => select_cmd(a, &out, started),
        Command::VerifyBound(a) => verify_cmd(a, &out, started),
        Command::McStudy(a) => study_cmd(a, &out, started),
    }
}

fn simulate_cmd(a: &SimulateArgs, started: Instant) -> Result<()> {
    let cfg = read_model_config(&a.model)?;
    let spec = cfg.to_spec()?;
    let traj = simulate_with_bounds(&spec, &cfg.bounds(), a.n, a.y0, a.seed)?;
    emit(a.out.as_deref(), &trajectory_csv(&traj), || {
        #[derive(Serialize)]
        struct Resolved<'a> {
            args: &'a SimulateArgs,
            model: &'a ModelConfig,
        }
        metadata("simulate", &Resolved { args: a, model: &cfg }, vec![a.seed], started)
    })
}

fn fit_cmd(a: &FitArgs, out: &Output, started: Instant) -> Result<()> {
    let traj = read_trajectory(&a.data)?;
    let em = a.em.config(a.seed)?;
    let fit = multistart_fit(&traj, a.states, &em)?;
    out.info(format!("loglik = {}", fmt_f64(fit.loglik)));
    out.info(format!("iterations = {}", fit.iterations));
    out.info(format!("converged = {}", fit.converged));
    out.info(format!("restarts = {}", em.restarts));
    out.info(format!("best_restart = {}", fit.restart));
    let model = ModelConfig::from_spec(&fit.spec, Some(em.bounds)).to_toml();
    match &a.out {
        Some(path) => {
            write_atomic(path, model.as_bytes())?;
            #[derive(Serialize)]
            struct Report<'a> {
                args: &'a FitArgs,
                loglik: f64,
                iterations: usize,
                converged: bool,
                best_restart: usize,
            }
            let report = Report {
                args: a,
                loglik: fit.loglik,
                iterations: fit.iterations,
                converged: fit.converged,
                best_restart: fit.restart,
            };
            let seeds = std::iter::once(a.seed).chain((0..em.restarts).map(|r| restart_seed(a.seed, r))).collect();
            write_atomic(&metadata_path(path), metadata("fit", &report, seeds, started).to_toml().as_bytes())?;
        }
        None => print!("{model}"),
    }
    Ok(())
}

fn select_cmd(a: &SelectArgs, out: &Output, started: Instant) -> Result<()> {
    let pen = a.penalty()?;
    let em = a.em.config(a.seed)?;
    let traj = read_trajectory(&a.data)?;
    let sel = select_order(&traj, a.m_max, &em, &pen)?;
    let mut table = String::from("m,loglik,penalty,criterion,iterations,converged\n");
    for r in &sel.rows {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.m,
            fmt_f64(r.loglik),
            fmt_f64(r.penalty),
            fmt_f64(r.criterion),
            r.iterations,
            r.converged
        ));
    }
    for (m, reason) in &sel.excluded {
        log::warn!("order {m} excluded: {reason}");
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SelectArgs,
        m_hat: usize,
        m_max_used: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        stopping_rule: Option<&'static str>,
    }
    let stopping_rule = sel.auto.then_some("heuristic: stop after two consecutive criterion increases");
    let resolved = Resolved { args: a, m_hat: sel.m_hat, m_max_used: sel.m_max, stopping_rule };
    emit(a.out.as_deref(), &table, || metadata("select", &resolved, vec![a.seed], started))?;
    if let Some(path) = &a.model_out {
        let model = ModelConfig::from_spec(&sel.chosen().spec, Some(em.bounds)).to_toml();
        write_atomic(path, model.as_bytes())?;
    }
    println!("m_hat = {}", sel.m_hat);
    if !out.quiet && sel.auto {
        eprintln!("orders 1..={} fitted; search stopped by the two-increase rule", sel.m_max);
    }
    Ok(())
}

fn verify_cmd(a: &VerifyArgs, out: &Output, started: Instant) -> Result<()> {
    if a.n_min < 4 || a.n_min > a.n_max {
        return Err(Error::OutOfRange(format!("need 4 <= n_min <= n_max, got {}..{}", a.n_min, a.n_max)));
    }
    if a.m_min < 1 || a.m_min > a.m_max {
        return Err(Error::OutOfRange(format!("need 1 <= m_min <= m_max, got {}..{}", a.m_min, a.m_max)));
    }
    if path_count(a.m_max, a.n_max, BRUTE_FORCE_LIMIT).is_none() {
        return Err(Error::SizeGuard { states: a.m_max, len: a.n_max, limit: BRUTE_FORCE_LIMIT });
    }
    let prior = PriorConfig::with_tau2(a.tau2);
    prior.check()?;
    let mut table = String::from(
        "trial,seed,n,m,loglik,log_mixture,lhs,leading,c_m,d,e_m,ratio_term,rhs_total,slack,excluded_paths\n",
    );
    let mut min_slack = f64::INFINITY;
    for trial in 0..a.trials {
        let seed = mix_seed(a.seed, trial as u64);
        let mut rng = rng_from_seed(seed);
        let n = rng.gen_range(a.n_min..=a.n_max);
        let m = rng.gen_range(a.m_min..=a.m_max);
        let spec = ModelSpec::random(m, &mut rng);
        let traj = regime_select::model::simulate(&spec, n, 0.0, mix_seed(seed, 1))?;
        let r = verify_bound(&spec, &traj, &prior)?;
        min_slack = min_slack.min(r.slack);
        let t = r.terms;
        let cols = [r.loglik, r.log_mixture, r.lhs, t.leading, t.c_m, t.d, t.e_m, t.ratio_term, t.rhs_total, r.slack];
        table.push_str(&format!("{trial},{seed},{n},{m}"));
        for v in cols {
            table.push(',');
            table.push_str(&fmt_f64(v));
        }
        table.push_str(&format!(",{}\n", r.excluded_paths));
    }
    emit(a.out.as_deref(), &table, || metadata("verify-bound", a, vec![a.seed], started))?;
    if a.trials == 0 {
        out.info("min slack = n/a (no trials)");
    } else {
        println!("min slack = {}", fmt_f64(min_slack));
    }
    Ok(())
}

fn study_cmd(a: &StudyArgs, out: &Output, started: Instant) -> Result<()> {
    let mut loaded = read_study(&a.config)?;
    if let Some(seed) = a.seed {
        loaded.config.base_seed = seed;
        loaded.file.base_seed = seed;
    }
    let result = mc_consistency_study(&loaded.spec, &loaded.config)?;
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io { path: a.out.clone(), source })?;
    write_atomic(&a.out.join("detail.csv"), study_detail_csv(&result).as_bytes())?;
    let summary = study_summary_csv(&result);
    write_atomic(&a.out.join("summary.csv"), summary.as_bytes())?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        study: &'a regime_select::io::StudyFile,
        model: &'a ModelConfig,
        exact_rate_nondecreasing: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        stopping_rule: Option<&'static str>,
    }
    let stopping_rule = (loaded.config.max_order == MaxOrder::Auto)
        .then_some("heuristic: stop after two consecutive criterion increases");
    let resolved = Resolved {
        study: &loaded.file,
        model: &loaded.model,
        exact_rate_nondecreasing: result.exact_rate_nondecreasing,
        stopping_rule,
    };
    let meta = metadata("mc-study", &resolved, vec![loaded.config.base_seed], started);
    write_atomic(&a.out.join("study.meta.toml"), meta.to_toml().as_bytes())?;
    out.info(summary.trim_end());
    out.info(format!("P(m_hat = m0) non-decreasing in n: {}", result.exact_rate_nondecreasing));
    if result.detail.iter().all(|r| r.m_hat.is_none()) {
        return Err(Error::FitFailure("every replication failed".into()));
    }
    Ok(())
}
