//! Crate-wide error type. The CLI maps these onto process exit codes:
//! configuration and argument problems exit 1, data and I/O problems exit 2,
//! numeric failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operand value lies outside the mathematical domain of the op.
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A forward computation produced NaN or infinity.
    #[error("{op}: non-finite value at flat index {index}; forward pass aborted")]
    NonFinite { op: &'static str, index: usize },

    /// Invalid call against an otherwise well-formed object.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Bad experiment configuration (unknown key, missing field, bad value).
    #[error("configuration error: {0}")]
    Config(String),

    /// A data or checkpoint file failed to parse.
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 1,
            Error::Io(_) | Error::Format { .. } => 2,
            Error::Dimension { .. } | Error::Domain { .. } | Error::NonFinite { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
