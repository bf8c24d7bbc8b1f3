use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how callers are expected to react: dimension and
/// contract errors indicate programming mistakes at an API boundary,
/// validation/config errors indicate bad user input, and `MissingDependency`
/// indicates a pipeline stage was run out of order.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value failed a domain invariant (bad box, bad score, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad run or generator configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file could not be parsed.
    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A required artifact from an earlier stage is absent.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// Temporal interaction was asked to run with no memory frames.
    #[error("no memory frames available for temporal interaction")]
    EmptyMemory,

    /// A numeric operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
