use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}; depth must be positive")]
    InvalidDepth(f64),
    #[error("composed depth {depth} is not positive at pixel {index}")]
    DegenerateDepth { index: usize, depth: f64 },
    #[error("no overlap between source and target views")]
    NoOverlap,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("value {0} is outside the domain of this function")]
    Domain(f64),
    #[error("empty mask")]
    EmptyMask,
    #[error("insufficient correspondences: need {needed}, have {have}")]
    InsufficientCorrespondences { needed: usize, have: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("graph is not connected")]
    Disconnected,
    #[error("tracking lost")]
    TrackingLost,
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
