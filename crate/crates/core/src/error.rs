use std::path::PathBuf;

use thiserror::Error;

use crate::volume::GridSpec;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum QsmError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: GridSpec, found: GridSpec },

    #[error("length mismatch: expected {expected}, found {found} ({context})")]
    LengthMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("invalid orientation: {0}")]
    InvalidOrientation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("iterate diverged at iteration {iteration}: norm {norm:.3e} exceeds bound {bound:.3e}")]
    Divergence { iteration: usize, norm: f64, bound: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    TrainingDiverged { epoch: usize, step: usize, loss: f64 },

    #[error("autodiff tape: {0}")]
    Tape(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("unsupported container version: {0}")]
    VersionMismatch(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl QsmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QsmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        QsmError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            QsmError::NonFinite(_) | QsmError::Divergence { .. } | QsmError::TrainingDiverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, QsmError>;
