use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CodError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("archive entry `{key}`: {msg}")]
    Archive { key: String, msg: String },

    #[error("malformed archive: {0}")]
    ArchiveFormat(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples: {samples})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CodError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        CodError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
