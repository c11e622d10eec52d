use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition (shape, range, emptiness).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A configuration value or combination is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Integration or training produced a non-finite value.
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Attach a step index to a numerical failure raised without one.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numerical { message, .. } => Error::Numerical { step, message },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Format(_) | Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
