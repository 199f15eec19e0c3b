//! Tiny causal character-level language model used both as the frozen
//! reference and as the trainable policy.

pub mod checkpoint;
mod model;
pub mod vocab;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, CheckpointError};
pub use model::{
    layout, target_indices, BoundParams, ModelConfig, ModelParams, SequenceLogLik, TinyLm,
};
pub use vocab::Vocab;

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty response")]
    EmptyResponse,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty batch")]
    EmptyBatch,
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
    #[error("token id {0} is out of range")]
    InvalidToken(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] DiffError),
}
