use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or physically meaningless configuration.
    #[error("config: {0}")]
    Config(String),
    /// Input data violates a precondition of the operation.
    #[error("input: {0}")]
    Input(String),
    /// Training aborted on a non-finite loss or gradient.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    /// Malformed on-disk data; offset is measured in bytes from file start.
    #[error("parse: {path}: byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Broken internal invariant; indicates a bug rather than bad input.
    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
