use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed edge-list input. `line` is 1-based.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    /// Input too large for an exact enumeration routine.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The projected Newton solver hit its iteration cap.
    #[error("estimator did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        best: Vec<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("Gram matrix of node {node} is singular")]
    Singular { node: NodeId },

    #[error("corrupt log {file}: {message}")]
    CorruptLog { file: String, message: String },

    #[error("no runs found in {0}")]
    NoRuns(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Domain(_) => "domain",
            Error::Capacity(_) => "capacity",
            Error::Config(_) => "config",
            Error::Convergence { .. } => "convergence",
            Error::Singular { .. } => "singular",
            Error::CorruptLog { .. } => "corrupt_log",
            Error::NoRuns(_) => "no_runs",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
