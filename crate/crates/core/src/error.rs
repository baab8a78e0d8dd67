use thiserror::Error;

use crate::tensorcore::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("sequence of {len} tokens exceeds the model limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("no rollout available for item {0}")]
    MissingRollout(usize),
    #[error("gold rewrites contain no supervised tokens")]
    EmptyGold,
    #[error("reward context has no {0} rollouts")]
    EmptyRolloutSet(&'static str),
    #[error("policy group {0} has no old-policy log-probabilities")]
    StaleGroup(usize),
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmallK(usize),
    #[error("cannot rank against an empty index")]
    EmptyIndex,
    #[error("query {0} has no relevance judgments")]
    UnjudgedQuery(u32),
    #[error("group {group} has {available} pairs, fewer than batch size {batch}")]
    GroupTooSmall { group: usize, available: usize, batch: usize },
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error("corrupt file: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("unknown token symbol {0:?}")]
    UnknownSymbol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
