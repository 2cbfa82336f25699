use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {line}: expected {expected} columns, found {found}")]
    WidthMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("sequence too short: need at least {needed} frames, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unknown action unit AU{0}")]
    UnknownAu(u32),
    #[error("unknown emotion label '{0}'")]
    UnknownEmotion(String),
    #[error("AU{au} intensity {level} outside 1..=5")]
    InvalidLevel { au: u32, level: u8 },
    #[error("AU{0} listed more than once")]
    DuplicateAu(u32),
    #[error("text prior is empty")]
    EmptyText,
    #[error("text does not follow the prior grammar: {0}")]
    UnparsableText(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("diffusion step {step} outside 0..{steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("non-finite gradient produced by op '{op}'")]
    NonFiniteGradient { op: &'static str },
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint incompatible with config: {}", .0.join("; "))]
    CheckpointIncompatible(Vec<String>),
    #[error("checkpoint is malformed: {0}")]
    MalformedCheckpoint(String),
    #[error("dataset missing or incomplete at {0}")]
    DatasetMissing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::CheckpointIncompatible(_) | Error::InvalidRange(_) => {
                ErrorClass::Config
            }
            Error::NonFiniteGradient { .. } | Error::NumericFailure(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
