use std::path::PathBuf;

/// Errors raised by the retrieval engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An embedding row has zero L2 norm.
    #[error("degenerate input: row {row} of {what} has zero norm")]
    ZeroNorm { what: &'static str, row: usize },

    /// A scalar or count parameter is outside its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data violates an invariant (non-finite entry, bad index, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A file could not be parsed.
    #[error("{path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
