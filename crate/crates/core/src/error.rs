use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs} vs {rhs}")]
    Shape { lhs: String, rhs: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("evolution diverged at step {step}")]
    Divergence { step: usize },

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (elastic = {elastic}, ce = {ce})"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        elastic: f64,
        ce: f64,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Shape {
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
