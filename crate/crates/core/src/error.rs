use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("channel matrix is rank deficient")]
    RankDeficient,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported constellation order {order} for {kind}")]
    UnsupportedOrder { kind: &'static str, order: usize },
    #[error("scaling factor must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("NNLS did not converge within {0} iterations")]
    IterationLimit(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
