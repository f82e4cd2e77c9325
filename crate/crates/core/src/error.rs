//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("kernel matrix is not positive definite (Cholesky failed even with jitter)")]
    IllConditionedKernel,

    #[error("invalid data: {0}")]
    Data(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty subset after filtering")]
    EmptySubset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("hyperparameter optimization failed: every evaluation was rejected")]
    OptimizationFailed,

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("run {run_index} failed: {source}")]
    RunFailed {
        run_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            got,
        }
    }
}
