use thiserror::Error;

/// Errors raised by the regression, inference and evaluation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An object is used in a state that does not permit the operation.
    #[error("invalid state: {0}")]
    State(String),
    /// A linear system or numeric routine failed.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
