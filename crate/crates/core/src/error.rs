//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Shape violations are
//! reported eagerly with the offending operation named, so a misassembled
//! model fails at the first bad op instead of deep inside a backward pass.

use std::path::PathBuf;

/// Errors produced by tensor ops, data handling, configuration and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not compose.
    #[error("{op}: {message}")]
    Shape {
        /// Name of the operation that rejected its inputs.
        op: &'static str,
        /// Human-readable description of the mismatch.
        message: String,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A serialized artifact could not be decoded. `offset` is the byte
    /// position at which decoding failed, when known.
    #[error("parse error at byte {offset}: {message}")]
    Parse {
        /// Byte offset of the failure within the input.
        offset: u64,
        /// Description of what was expected.
        message: String,
    },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite {
        /// Where the non-finite value appeared.
        context: String,
    },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_good:?}")]
    Divergence {
        /// Optimizer step at which the loss became non-finite.
        step: usize,
        /// The offending loss value.
        loss: f64,
        /// Path of the most recent finite-loss checkpoint, if one was written.
        last_good: Option<PathBuf>,
    },

    /// A checkpoint was produced under a different model configuration.
    #[error("config hash mismatch: checkpoint has {found}, current config is {expected}")]
    HashMismatch {
        /// Hash of the configuration currently in effect.
        expected: String,
        /// Hash stored in the checkpoint.
        found: String,
    },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON encode/decode failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// TOML decode failure.
    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    /// TOML encode failure.
    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a [`Error::Shape`] with a formatted message.
    pub fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            op,
            message: message.into(),
        }
    }
}
