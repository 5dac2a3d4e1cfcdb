use thiserror::Error;

/// Errors raised anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("computation graph already consumed")]
    GraphConsumed,
    #[error("loss must be a scalar node, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sparse update: {0}")]
    Sparse(String),
    #[error("degenerate candidate: {0}")]
    DegenerateCandidate(String),
    #[error("mask redraw budget exhausted after {0} attempts")]
    RedrawExhausted(usize),
    #[error("attack: {0}")]
    Attack(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("gradient check failed for `{case}`: max relative error {error:.3e} exceeds {tolerance:.0e}")]
    GradCheck {
        case: String,
        error: f64,
        tolerance: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
