use thiserror::Error;

use crate::numerics::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("numerical failure: {0}")]
    Numerics(String),
}

impl Error {
    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Mismatch(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
