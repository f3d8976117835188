//! Error taxonomy shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched or invalid tensor shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument outside the shape system (bad fraction, bad axis...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Invalid run or network configuration; the message lists every violation.
    #[error("config error: {0}")]
    Config(String),

    /// An op produced NaN or Inf; surfaced immediately instead of propagated.
    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Input too small for the operation to be well defined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed file contents (magic, header fields, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// Recognized but deliberately unhandled input.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training stopped early; carries the diagnostics snapshot.
    #[error("training aborted at step {step}: {reason}")]
    TrainAbort { step: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
