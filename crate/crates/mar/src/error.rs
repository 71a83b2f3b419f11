use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum MarError {
    #[error("degenerate vector: norm {norm} is at or below {eps}")]
    DegenerateVector { norm: f64, eps: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch too small: need at least {min}, got {got}")]
    BatchTooSmall { min: usize, got: usize },
    #[error("non-finite activation encountered")]
    NonFiniteActivation,
    #[error("agent bank is empty")]
    EmptyAgentBank,
    #[error("no view has at least two samples")]
    NoValidViews,
    #[error("mining produced an empty {which} set")]
    EmptyMiningSet { which: &'static str },
    #[error("label {label} out of range 1..={max}")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no pretraining statistics available")]
    NoPretrainStats,
    #[error("invalid rescaling value {0}: must be positive and finite")]
    InvalidScale(f64),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no probe has a valid cross-view match")]
    NoValidProbes,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MarError>;
