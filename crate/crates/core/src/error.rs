use thiserror::Error;

/// Crate-wide error type. `Config`, `Shape` and `Data` map to CLI exit code 2,
/// `Numerical` to exit code 3.
#[derive(Debug, Error)]
pub enum EcdiffError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EcdiffError>;

impl EcdiffError {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            EcdiffError::Numerical(_) => 3,
            _ => 2,
        }
    }
}
