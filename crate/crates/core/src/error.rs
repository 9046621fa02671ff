use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("label {label} is outside the class subset")]
    LabelOutsideSubset { label: usize },

    #[error("batch too small: need at least {needed} rows, got {got}")]
    BatchTooSmall { needed: usize, got: usize },

    #[error("memory buffer is empty")]
    EmptyBuffer,

    #[error("no class means available")]
    NoMeans,

    #[error("invalid evaluation mode: {0}")]
    InvalidMode(String),

    #[error("accuracy matrix is incomplete: missing a[{task}][{after}]")]
    IncompleteMatrix { task: usize, after: usize },

    #[error("BOF is undefined when test accuracy is zero")]
    UndefinedBof,

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
