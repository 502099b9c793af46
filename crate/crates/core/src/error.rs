use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Zero-norm vectors and similar inputs where the math is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A non-finite gradient reached the optimizer; the step was refused.
    #[error("poisoned optimizer state: {0}")]
    PoisonedState(String),

    #[error("divergence at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by arithmetic blowing up rather than bad input.
    pub fn is_numeric_failure(&self) -> bool {
        matches!(self, Error::PoisonedState(_) | Error::Divergence { .. })
    }
}
