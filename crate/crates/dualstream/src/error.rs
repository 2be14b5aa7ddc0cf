//! Error type shared across the codec: I/O, file-format, configuration, and
//! numeric failures each get their own variant so callers (and the CLI's exit
//! codes) can tell them apart.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or inconsistent external data: WAV files, packed token
    /// streams, feature files, checkpoints.
    #[error("format: {0}")]
    Format(String),

    /// Invalid configuration or arguments (bad variant, out-of-range sizes).
    #[error("config: {0}")]
    Config(String),

    /// Numeric failure during computation (non-finite loss, zero-energy
    /// reference signal).
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

impl CodecError {
    pub fn format(msg: impl Into<String>) -> Self {
        CodecError::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CodecError::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        CodecError::Numeric(msg.into())
    }
}
