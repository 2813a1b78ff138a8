use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fusion / training / evaluation stack.
#[derive(Debug, Error)]
pub enum EmoqError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EmoqError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        EmoqError::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EmoqError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = configuration problem, 3 = bad input data, 4 = numeric failure.
    /// Everything else maps to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            EmoqError::Config(_) => 2,
            EmoqError::Data(_) | EmoqError::Io { .. } | EmoqError::Checkpoint(_) => 3,
            EmoqError::Numeric(_) => 4,
            EmoqError::Shape { .. } | EmoqError::InvalidArgument(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, EmoqError>;
