//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and an expected layout) do not conform.
    /// Carries both shapes so the message names them.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A forward op produced (or was handed) a non-finite value.
    NonFinite { context: &'static str },
    /// Numeric failure with a dynamic diagnostic (which loss part blew up,
    /// which gradient went non-finite, ...).
    Numeric(String),
    /// API misuse: a contract violated by the caller (non-scalar loss,
    /// empty image, step size out of range, ...).
    Usage(String),
    /// Invalid configuration value (negative rate, bad enum, ...).
    Config(String),
    /// Invalid data (label out of range, malformed file contents, ...).
    Data(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shapes do not conform: {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
