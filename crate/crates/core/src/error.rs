use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum QgnError {
    #[error("format error: {0}")]
    Format(String),
    #[error("class id out of range: {0}")]
    ClassRange(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid quadtree structure: {0}")]
    Structure(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("wrong weighting mode: {0}")]
    Mode(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl QgnError {
    /// Stable process exit code for the CLI surface.
    /// 1 = format, 2 = shape/bounds, 3 = structure, 4 = config/mode/input.
    pub fn exit_code(&self) -> i32 {
        match self {
            QgnError::Format(_) | QgnError::ClassRange(_) | QgnError::Io(_) => 1,
            QgnError::Shape(_) | QgnError::Bounds(_) => 2,
            QgnError::Structure(_) => 3,
            QgnError::Config(_) | QgnError::Mode(_) | QgnError::Input(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, QgnError>;
