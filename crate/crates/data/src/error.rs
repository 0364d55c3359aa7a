use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    Magic { expected: u32, found: u32 },
    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0}")]
    Format(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("normalization: {0}")]
    Normalization(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Core(#[from] ienet_core::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}
