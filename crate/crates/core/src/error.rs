//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor operations, model configuration, data generation,
/// training, and file I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A configuration value is invalid (image size, split definition, ...).
    Config(String),
    /// A caller violated an operation's contract (non-scalar loss, index out
    /// of range, missing gradient, ...).
    Contract(String),
    /// Instance placement could not satisfy the spacing constraints within
    /// the retry budget.
    Placement { requested: usize, placed: usize },
    /// A loss or parameter became NaN/Inf during training.
    NonFinite { context: String },
    /// Underlying file I/O failure.
    Io(String),
    /// A config file, task file, or checkpoint could not be parsed.
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Placement { requested, placed } => write!(
                f,
                "placement error: placed {placed} of {requested} instances before exhausting retries"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
