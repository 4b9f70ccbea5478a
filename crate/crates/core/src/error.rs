use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive semidefinite: eigenvalue {min_eig:.3e} below {tolerance:.3e}")]
    NotPsd { min_eig: f64, tolerance: f64 },

    #[error("training produced a non-finite loss at step {step}")]
    Training { step: usize },

    #[error("dense oracle cap exceeded ({size} > {cap}); use the Matheron sampler instead")]
    OracleCap { size: usize, cap: usize },

    #[error("memory budget exceeded: needs {needed} bytes, budget is {budget} bytes")]
    Resource { needed: u64, budget: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn domain_err(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
