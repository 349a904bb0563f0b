use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// NaN/inf encountered, or an operator behaved as if it were not SPD.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Tape misuse, e.g. backward on a value that carries no gradient path.
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    /// Malformed tensor file or checkpoint.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
