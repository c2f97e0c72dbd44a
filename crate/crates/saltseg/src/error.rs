use thiserror::Error;

/// Errors surfaced by the library. Each category maps onto a CLI exit code.
#[derive(Debug, Error)]
pub enum SaltError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("state error: {0}")]
    State(String),
}

impl SaltError {
    /// CLI exit code for this error: 1 usage, 2 data, 3 numeric, 4 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            SaltError::Validation(_) => 1,
            SaltError::Shape(_) | SaltError::Data(_) | SaltError::Io(_) => 2,
            SaltError::Numeric(_) => 3,
            SaltError::Checkpoint(_) => 4,
            SaltError::State(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SaltError>;
