use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config key `{key}`: {constraint}")]
    Config { key: String, constraint: String },
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("training diverged at {at}; last finite epoch: {last_finite_epoch:?}")]
    Diverged {
        at: String,
        last_finite_epoch: Option<usize>,
    },
    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("archive {path}: {message}")]
    Archive { path: PathBuf, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
