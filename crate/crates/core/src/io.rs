//! File formats: model and study configs (TOML), trajectory and result
//! tables (CSV), run metadata sidecars, atomic writes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EmConfig;
use crate::model::{validate_model, ModelSpec, ParameterBounds, RegimeParams, Trajectory, TransitionMatrix};
use crate::selection::{MaxOrder, PenaltyConfig, StudyConfig, StudyResult};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Parse { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.flush().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Shortest form that still carries 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Model config
// ---------------------------------------------------------------------------

/// On-disk model description.
///
/// ```toml
/// m = 2
/// transition = [[0.9, 0.1], [0.1, 0.9]]
///
/// [[regimes]]
/// b = -2.0
/// alpha = 0.3
/// sigma2 = 1.0
///
/// [[regimes]]
/// b = 2.0
/// alpha = -0.2
/// sigma2 = 1.0
///
/// [bounds]      # optional
/// c = 1e-4
/// d = 1e4
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub transition: Vec<Vec<f64>>,
    pub regimes: Vec<RegimeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ParameterBounds>,
}

impl ModelConfig {
    pub fn from_spec(spec: &ModelSpec, bounds: Option<ParameterBounds>) -> Self {
        Self { m: Some(spec.m()), transition: spec.transition().rows(), regimes: spec.regimes().to_vec(), bounds }
    }

    pub fn bounds(&self) -> ParameterBounds {
        self.bounds.unwrap_or_default()
    }

    /// Builds the model and runs every validity check.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let bounds = self.bounds();
        bounds.check()?;
        let a = TransitionMatrix::from_rows(&self.transition)?;
        let spec = match self.m {
            Some(m) => ModelSpec::with_declared_states(m, self.regimes.clone(), a)?,
            None => ModelSpec::new(self.regimes.clone(), a)?,
        };
        let violations = validate_model(&spec, &bounds);
        if violations.is_empty() {
            Ok(spec)
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    toml::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

// ---------------------------------------------------------------------------
// Study config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(PathBuf),
    Inline(ModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub transition_floor: f64,
    pub min_obs_per_state: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        let d = EmConfig::default();
        Self {
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
            restarts: d.restarts,
            transition_floor: d.transition_floor,
            min_obs_per_state: d.min_obs_per_state,
        }
    }
}

impl EmSection {
    pub fn to_config(&self, bounds: ParameterBounds, seed: u64) -> EmConfig {
        EmConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            restarts: self.restarts,
            bounds,
            transition_floor: self.transition_floor,
            seed,
            min_obs_per_state: self.min_obs_per_state,
        }
    }
}

/// Monte Carlo study description.
///
/// ```toml
/// model = "benchmark.toml"   # or an inline [model] table
/// n_grid = [500, 1000, 2000]
/// replications = 100
/// base_seed = 1
/// m_max = "auto"             # or an integer
///
/// [em]
/// restarts = 10
///
/// [penalty]
/// rho = 3.0
/// phi = "sqrt"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    pub model: ModelRef,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    #[serde(default, serialize_with = "seed_as_string", deserialize_with = "seed_from_int_or_string")]
    pub base_seed: u64,
    #[serde(default = "auto_order")]
    pub m_max: OrderSetting,
    #[serde(default)]
    pub y0: f64,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub penalty: PenaltyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSetting {
    Fixed(usize),
    Named(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

fn auto_order() -> OrderSetting {
    OrderSetting::Named(AutoKeyword::Auto)
}

impl OrderSetting {
    pub fn to_max_order(self) -> Result<MaxOrder> {
        match self {
            OrderSetting::Fixed(0) => Err(Error::Config("m_max must be at least 1".into())),
            OrderSetting::Fixed(m) => Ok(MaxOrder::Fixed(m)),
            OrderSetting::Named(AutoKeyword::Auto) => Ok(MaxOrder::Auto),
        }
    }
}

pub struct LoadedStudy {
    pub file: StudyFile,
    pub model: ModelConfig,
    pub spec: ModelSpec,
    pub config: StudyConfig,
}

pub fn read_study(path: &Path) -> Result<LoadedStudy> {
    let file: StudyFile = toml::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))?;
    let model = match &file.model {
        ModelRef::Inline(m) => m.clone(),
        ModelRef::Path(p) => {
            let resolved = if p.is_relative() { path.parent().unwrap_or(Path::new(".")).join(p) } else { p.clone() };
            read_model_config(&resolved)?
        }
    };
    let spec = model.to_spec()?;
    let config = StudyConfig {
        n_grid: file.n_grid.clone(),
        replications: file.replications,
        em: file.em.to_config(model.bounds(), 0),
        penalty: file.penalty,
        max_order: file.m_max.to_max_order()?,
        base_seed: file.base_seed,
        y0: file.y0,
    };
    Ok(LoadedStudy { file, model, spec, config })
}

// ---------------------------------------------------------------------------
// Trajectory CSV
// ---------------------------------------------------------------------------

/// `t,y,x` with the initial condition on row `t = 0` and 1-based states.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,y,x\n");
    out.push_str(&format!("0,{},\n", fmt_f64(traj.y0)));
    for (k, y) in traj.y.iter().enumerate() {
        let x = traj.path.as_ref().map(|p| (p[k] + 1).to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{x}\n", k + 1, fmt_f64(*y)));
    }
    out
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["t", "y"] && names != ["t", "y", "x"] {
        return Err(parse_err(path, format!("expected header t,y[,x], got {}", names.join(","))));
    }
    let mut ys = Vec::new();
    let mut xs: Vec<Option<usize>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e))?;
        let line = row + 2;
        let t: usize =
            record.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err(path, format!("line {line}: bad t")))?;
        if t != row {
            return Err(parse_err(path, format!("line {line}: expected t = {row}, got {t}")));
        }
        let y: f64 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_err(path, format!("line {line}: bad y")))?;
        ys.push(y);
        let x = match record.get(2) {
            None | Some("") => None,
            Some(s) => match s.parse::<usize>() {
                Ok(v) if v >= 1 => Some(v - 1),
                _ => return Err(parse_err(path, format!("line {line}: state must be a positive integer, got '{s}'"))),
            },
        };
        if t > 0 {
            xs.push(x);
        }
    }
    if ys.len() < 2 {
        return Err(parse_err(path, "need the t = 0 row and at least one observation"));
    }
    let y0 = ys.remove(0);
    if xs.iter().all(Option::is_some) {
        Trajectory::with_path(y0, ys, xs.into_iter().flatten().collect())
    } else if xs.iter().all(Option::is_none) {
        Ok(Trajectory::new(y0, ys))
    } else {
        Err(parse_err(path, "state column is filled on some rows only"))
    }
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&read_text(path)?, path)
}

// ---------------------------------------------------------------------------
// Study tables
// ---------------------------------------------------------------------------

pub fn study_detail_csv(result: &StudyResult) -> String {
    let width = result.detail.iter().flat_map(|r| r.orders.iter().map(|o| o.0)).max().unwrap_or(0);
    let mut out = String::from("n,replication,m_hat");
    for m in 1..=width {
        out.push_str(&format!(",loglik_{m}"));
    }
    for m in 1..=width {
        out.push_str(&format!(",pen_{m}"));
    }
    out.push_str(",failure\n");
    for row in &result.detail {
        out.push_str(&format!(
            "{},{},{}",
            row.n,
            row.replication,
            row.m_hat.map(|m| m.to_string()).unwrap_or_default()
        ));
        let lookup = |m: usize| row.orders.iter().find(|o| o.0 == m);
        for m in 1..=width {
            out.push(',');
            if let Some(o) = lookup(m) {
                out.push_str(&fmt_f64(o.1));
            }
        }
        for m in 1..=width {
            out.push(',');
            if let Some(o) = lookup(m) {
                out.push_str(&fmt_f64(o.2));
            }
        }
        let failure = row.failure.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        if failure.is_empty() {
            out.push_str(",\n");
        } else {
            out.push_str(&format!(",\"{failure}\"\n"));
        }
    }
    out
}

pub fn study_summary_csv(result: &StudyResult) -> String {
    let mut out = String::from("n,P_under,P_exact,P_over,P_fail,failures\n");
    for s in &result.summary {
        out.push_str(&format!("{},{},{},{},{},{}\n", s.n, s.p_under, s.p_exact, s.p_over, s.p_fail, s.failures));
    }
    out
}

// ---------------------------------------------------------------------------
// Run metadata
// ---------------------------------------------------------------------------

/// TOML integers are signed, so seeds are written as decimal strings.
pub fn seed_as_string<S: serde::Serializer>(seed: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&seed.to_string())
}

/// Accepts a seed written either as an integer or as a decimal string.
pub fn seed_from_int_or_string<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(v) => Ok(v),
        Raw::Text(t) => t.trim().parse().map_err(serde::de::Error::custom),
    }
}

pub fn optional_seed_as_string<S: serde::Serializer>(seed: &Option<u64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match seed {
        Some(v) => s.serialize_str(&v.to_string()),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub generator: String,
    pub seeds: Vec<String>,
    pub duration_seconds: f64,
    /// Resolved configuration of the run.
    pub config: toml::Value,
}

impl RunMetadata {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metadata serializes")
    }
}

/// `<path>.meta.toml`
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}
