//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// All failure modes surfaced by this crate.
///
/// The variants map onto the process exit codes used by the CLI:
/// usage/config errors exit 2, data errors exit 3, numeric errors exit 4.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Caller violated an operation precondition (shape mismatch, out-of-range
    /// argument, ...).
    Usage(String),
    /// Invalid configuration (schema inconsistencies, bad hyperparameters).
    Config(String),
    /// Problem with the data itself (unknown category, constant column,
    /// missing group).
    Data(String),
    /// Non-finite value or divergence encountered during computation.
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
