use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug, Error)]
pub enum FcddError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported backbone `{0}`")]
    UnsupportedBackbone(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("weight load failed: {0}")]
    WeightLoad(String),

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("failed to load image {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("failed to write {path}: {source}")]
    FileWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("archive version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

pub type Result<T, E = FcddError> = std::result::Result<T, E>;

impl FcddError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FcddError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FcddError::FileWrite {
            path: path.into(),
            source,
        }
    }
}
