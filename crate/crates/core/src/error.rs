use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no usable samples in {0}")]
    DatasetEmpty(String),

    #[error("cannot decode {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("{} is not a single-channel grayscale image ({color})", path.display())]
    Channel { path: PathBuf, color: String },

    #[error("batch size {batch_size} exceeds smallest dataset size {available}")]
    BatchTooLarge { batch_size: usize, available: usize },

    #[error("no counterpart for {0}")]
    PairingMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature extractor is not frozen")]
    FrozenViolation,

    #[error("training diverged at step {step}: {breakdown:?}")]
    TrainingDiverged { step: u64, breakdown: Box<LossBreakdown> },

    #[error("non-finite value in {0}")]
    Numerical(String),

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    Window { height: usize, width: usize, window: usize },

    #[error("image {height}x{width} too small for {scales} scales")]
    Scale { height: usize, width: usize, scales: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable identifier printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DatasetEmpty(_) => "DatasetEmpty",
            Error::Decode { .. } => "DecodeError",
            Error::Channel { .. } => "ChannelError",
            Error::BatchTooLarge { .. } => "BatchTooLarge",
            Error::PairingMismatch(_) => "PairingMismatch",
            Error::Shape(_) => "ShapeError",
            Error::FrozenViolation => "FrozenViolation",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::Numerical(_) => "NumericalError",
            Error::Window { .. } => "WindowError",
            Error::Scale { .. } => "ScaleError",
            Error::Config(_) => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
