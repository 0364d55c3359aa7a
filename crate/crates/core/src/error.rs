use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("selection index {index} out of range for {extent} channels")]
    SelectionRange { index: usize, extent: usize },
    #[error("invalid selection: {0}")]
    Selection(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("odd spatial extent {0} for 2x2 max pooling")]
    OddPoolExtent(usize),
    #[error("invalid width ratios: {0}")]
    Widths(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("plan does not match architecture: {0}")]
    PlanMismatch(String),
    #[error("backward called without a matching train-mode forward: {0}")]
    MissingCache(String),
    #[error("invalid label {label} for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture hash mismatch: file has {found}, expected {expected}")]
    ArchHash { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
