//! Rewrite-driven generative embeddings at desk scale.

pub mod error;
pub mod grpo;
pub mod objectives;
pub mod retrieval;
pub mod rewards;
pub mod seqmodel;
pub mod synthtask;
pub mod tensorcore;

pub use error::{Error, Result};
