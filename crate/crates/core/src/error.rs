use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),

    #[error("unknown defect variation `{0}`")]
    UnknownVariation(String),
    #[error("unknown product `{0}`")]
    UnknownProduct(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),

    #[error("backend error: {0}")]
    Backend(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty similarity-map stack")]
    EmptyStack,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probabilities at pixel {pixel} sum to {sum}")]
    NonNormalizedProbs { pixel: usize, sum: f64 },
    #[error("prediction {value} at pixel {pixel} outside [0, 1]")]
    OutOfRangePrediction { pixel: usize, value: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("memory bank needs at least one reference image")]
    EmptyReferences,
    #[error("batched scoring needs at least two images, got {0}")]
    InsufficientBatch(usize),

    #[error("scores need both positive and negative labels")]
    DegenerateLabels,
    #[error("no positive labels")]
    NoPositives,
    #[error("no anomalous regions in ground truth")]
    NoRegions,

    #[error("dataset layout error at {path}: {reason}")]
    Layout { path: PathBuf, reason: String },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::UnknownVariation(_)
            | Error::UnknownProduct(_)
            | Error::UnknownState(_) => ErrorKind::Config,
            Error::ZeroVector
            | Error::NonNormalizedProbs { .. }
            | Error::OutOfRangePrediction { .. }
            | Error::NonFinite(_)
            | Error::DegenerateLabels
            | Error::NoPositives
            | Error::NoRegions => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
