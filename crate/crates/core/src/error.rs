use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the lab. Diagnostic conditions that are expected
/// outcomes of an experiment (a stage boundary that never appears, a step
/// size underflow near a singularity) are reported in results instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("signed token sum has norm {norm:e}; condensation direction is undefined")]
    ZeroDirection { norm: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("insufficient growth: ||W_Q|| grew by {growth:.3e}, need at least {required:.1e}")]
    InsufficientGrowth { growth: f64, required: f64 },

    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },

    #[error("margin {margin} unsatisfiable after {attempts} draws")]
    MarginUnsatisfiable { margin: f64, attempts: usize },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
