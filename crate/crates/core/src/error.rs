use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Every violation found while validating a configuration.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    /// Incompatible component combination detected while building a model.
    #[error("build error: {0}")]
    Build(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight `{0}` missing from weight file")]
    MissingWeight(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("path not found: {0}")]
    MissingPath(PathBuf),

    #[error("class mismatch: {0}")]
    ClassMismatch(String),

    #[error("corrupt container {path}: array `{array}`: {reason}")]
    Corrupt {
        path: PathBuf,
        array: String,
        reason: String,
    },

    #[error("checkpoint was written for config {found}, current config hashes to {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("non-finite loss {loss} at step {step} (lr {lr:e}); batch slices: {provenance}")]
    NonFinite {
        loss: f32,
        step: usize,
        lr: f64,
        provenance: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
