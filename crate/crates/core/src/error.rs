use std::io;

use thiserror::Error;

/// Errors produced by the notegate library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("sample rate mismatch: waveform is {actual} Hz but the time grid expects {expected} Hz (resample offline)")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("non-finite value after layer `{layer}`")]
    NonFinite { layer: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite values after `{layer}`")]
    Diverged { epoch: usize, batch: usize, layer: String },

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("unsupported {what} version {found} (supported: {supported})")]
    Version {
        what: &'static str,
        found: u16,
        supported: u16,
    },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
