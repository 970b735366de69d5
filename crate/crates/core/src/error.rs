use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of the state count, regime list and transition matrix disagree.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("model violates its assumptions: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("transition matrix has no unique stationary distribution ({0})")]
    NoUniqueStationary(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("instance too large for enumeration: {states}^{len} paths exceeds {limit}")]
    SizeGuard { states: usize, len: usize, limit: u64 },

    #[error("singular design for state {state}: {reason}")]
    SingularDesign { state: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate quadratic form Y'PY = {value:e} for state {state}")]
    DegenerateQuadratic { state: usize, value: f64 },

    #[error("quadrature did not converge: {0}")]
    OracleFailure(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate observation at step {0}: every state has zero weight")]
    DegenerateObservation(usize),

    #[error("state {state} starved: effective count {weight:.3} below 2")]
    RegimeStarvation { state: usize, weight: f64 },

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Structure(_)
            | Error::InvalidModel(_)
            | Error::NoUniqueStationary(_)
            | Error::Domain(_)
            | Error::SizeGuard { .. }
            | Error::OutOfRange(_)
            | Error::Config(_)
            | Error::Parse { .. } => 2,
            Error::SingularDesign { .. }
            | Error::InsufficientData(_)
            | Error::DegenerateQuadratic { .. }
            | Error::OracleFailure(_)
            | Error::DegenerateObservation(_)
            | Error::RegimeStarvation { .. }
            | Error::FitFailure(_) => 4,
        }
    }
}
