use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform; the message names the operands.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Input is degenerate for the requested operation (e.g. zero-norm
    /// vector fed to cosine similarity).
    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// The computation uses a primitive the gradient engine does not support.
    #[error("unsupported capability: {0}")]
    Capability(String),

    /// Invalid parameter or configuration value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or inconsistent data.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (non-finite value) with a diagnostic locating it.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint container problems (corruption, version or config mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
