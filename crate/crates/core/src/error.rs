use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed input row. `line` is 1-based and counts the header.
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: u64,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Corrupt or incompatible binary file (checkpoint, EMB1).
    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("{0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Config(_) => 2,
            Error::Parse { .. } | Error::Validation(_) | Error::Format(_) => 3,
            Error::NonFinite(_) => 4,
            Error::UndefinedCorrelation(_) | Error::Undefined(_) => 3,
        }
    }
}
