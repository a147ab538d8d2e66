use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by how a front-end should react: invalid input data,
/// invalid configuration, numeric failure, or plain IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("recording too short: {have} samples, need at least {need}")]
    RecordingTooShort { have: usize, need: usize },

    #[error("unsupported resample ratio: {from} Hz -> {to} Hz")]
    UnsupportedResampleRatio { from: u32, to: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("corrupt index: duplicate segment id {0:?}")]
    CorruptIndex(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate vector: zero L2 norm")]
    DegenerateVector,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("unknown segment id {0:?}")]
    UnknownSegment(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True when the error is a numeric failure (NaN, divergence, failed gradient check).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }

    /// True when the error stems from caller-supplied parameters rather than data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidParameter(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
