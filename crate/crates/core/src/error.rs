use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds the maximum of {max}{hint}")]
    SequenceOverflow {
        len: usize,
        max: usize,
        hint: &'static str,
    },

    #[error("shape mismatch for {target}: {detail}")]
    Shape { target: String, detail: String },

    #[error("memory holds {available} values but {required} are needed for rank-{rank} adapters")]
    InsufficientMemory {
        available: usize,
        required: usize,
        rank: usize,
    },

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }
}
