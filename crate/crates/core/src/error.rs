use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid requires square count, got {0}")]
    GridNotSquare(usize),

    #[error("no stability cap tabulated for L = {0}")]
    NoStabilityCap(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite channel entries")]
    NonFinite,

    #[error("covariance matrix is not positive definite")]
    Factorization,

    #[error("access point count {got} does not match antenna count {expected}")]
    ApCount { expected: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
