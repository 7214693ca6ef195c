use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type.
///
/// The CLI maps these onto process exit codes: `Config` -> 2,
/// `Capacity` and `Io` -> 3, everything else -> 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerics mode violation: {0}")]
    ModeViolation(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
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
