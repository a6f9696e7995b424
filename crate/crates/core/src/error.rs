use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io failure: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(what: &str, expected: usize, got: usize) -> Self {
        Error::InvalidArgument(format!("{what}: expected dimension {expected}, got {got}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(io::Error::other(e))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(io::Error::other(e))
    }
}
