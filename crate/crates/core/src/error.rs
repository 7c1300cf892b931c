use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range 1..={len}")]
    Range { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: line {line}: {msg}")]
    Ingest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("average precision undefined: {0}")]
    UndefinedAp(String),

    #[error("non-finite loss at iteration {iteration} (batch sample seeds {seeds:?})")]
    NonFinite { iteration: usize, seeds: Vec<u64> },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png: {0}")]
    Png(String),

    #[error("json: {0}")]
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
