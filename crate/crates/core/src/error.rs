use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the engine. Each variant maps to one process exit code
/// class so the command-line driver can report failures uniformly.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent run configuration.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Malformed input text, with the 1-based line number when known.
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    /// Well-formed input that violates a data invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape or box dimensionality mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss or gradient became non-finite during training.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A hard-volume loss would be infinite (log of zero).
    #[error("infinite loss: {0}")]
    InfiniteLoss(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error::Data(message.into())
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Divergence(_) | Error::InfiniteLoss(_) => 4,
            Error::Parse { .. } | Error::Data(_) | Error::Shape(_) | Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
