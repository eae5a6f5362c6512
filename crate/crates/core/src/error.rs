use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric overflow: {op} at node {node} produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },

    #[error("op {op} has no tangent rule")]
    UnsupportedTangent { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    Vocabulary { id: usize, vocab: usize },

    #[error("cannot encode character {0:?}")]
    Encode(char),

    #[error("dataset capacity exceeded: requested {requested} distinct samples, only {available} exist")]
    Capacity { requested: u128, available: u128 },

    #[error("degenerate covariance: all trajectory states are identical")]
    DegenerateCovariance,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
