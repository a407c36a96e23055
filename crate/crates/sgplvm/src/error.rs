use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model state: {0}")]
    State(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("conditioning failed: {0}")]
    Conditioning(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
