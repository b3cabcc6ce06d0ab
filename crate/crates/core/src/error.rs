use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum DivaError {
    #[error("shape mismatch at {at}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        at: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid label {label} for a model with {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("sample rejected: {0}")]
    Rejected(String),

    #[error("freeze contract violated: {0}")]
    FrozenParameters(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DivaError {
    /// Process exit code for this error class: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            DivaError::Config(_) | DivaError::InvalidArgument(_) => 2,
            DivaError::Numerical(_) | DivaError::FrozenParameters(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, DivaError>;
