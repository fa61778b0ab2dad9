use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("vertex {id} out of range (graph has {len} vertices)")]
    OutOfRange { id: usize, len: usize },

    #[error("distance budget exhausted")]
    BudgetExhausted,

    #[error("vertex {v_star} is not reachable from the entry vertex {entry}")]
    Unreachable { v_star: u32, entry: u32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::Io(_) | Error::Format(_) | Error::Dimension { .. } | Error::OutOfRange { .. } => 2,
            Error::BudgetExhausted | Error::Unreachable { .. } | Error::NonFinite(_) | Error::Runtime(_) => 3,
        }
    }
}
