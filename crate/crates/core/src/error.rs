//! Crate-wide error type and the CLI exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("bag contains no patches")]
    EmptyBag,

    #[error("unsupported PGM depth: maxval {0} (expected 255 or 65535)")]
    UnsupportedDepth(u32),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("test undefined: {0}")]
    UndefinedTest(String),

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code: 1 I/O, 2 validation, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
