use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("graph is not connected")]
    Disconnected,

    #[error("no connected graph found after {retries} retries (edge probability too small for K)")]
    GraphRetriesExhausted { retries: usize },

    #[error("node {node} has no self-loop")]
    MissingSelfLoop { node: usize },

    #[error("invalid combination matrix: {0}")]
    InvalidMatrix(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    PerronNotConverged { iterations: usize, residual: f64 },

    #[error("Perron vector has non-positive entry {value:e} at index {index}; matrix is reducible")]
    PerronNotPositive { index: usize, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite gradient at agent {agent}, iteration {iteration}")]
    NonFiniteGradient { agent: usize, iteration: u64 },

    #[error("decision boundary undefined for zero weight vector")]
    ZeroWeights,

    #[error("solver did not reach tolerance after {iterations} iterations (gradient norm {grad_norm:e})")]
    SolverNotConverged { iterations: usize, grad_norm: f64 },

    #[error("trace is missing MSD values; run training with an oracle minimizer")]
    MissingOracle,

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
