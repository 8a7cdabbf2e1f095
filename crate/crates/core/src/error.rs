use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, range or contract precondition was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A computation produced or received non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file did not match its expected binary or text layout.
    #[error("format error in {field} at byte {offset}: {message}")]
    Format {
        field: String,
        offset: u64,
        message: String,
    },

    /// Bad configuration key or value.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
