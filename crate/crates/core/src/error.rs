use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("ingestion failed at {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("every query was excluded by the protocol")]
    EmptyProtocol,

    #[error("gradient check failed: {0}")]
    CheckFailure(String),

    #[error("non-finite loss term `{term}` ({value}) at epoch {epoch}, iteration {iter}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        epoch: usize,
        iter: usize,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidShape(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_shape;
