use std::io;

use thiserror::Error;

/// Errors raised by the scoring engine.
///
/// Variants split roughly into bad input (parse/format/data problems a user
/// can fix) and internal faults such as shape mismatches inside the model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Format(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidData(message.into())
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True when the error stems from user-supplied data rather than an
    /// internal fault.
    pub fn is_bad_input(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Format(_) | Error::InvalidData(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
