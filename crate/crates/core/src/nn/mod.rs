//! Small decoder-only policy over frozen, optionally quantized projections.

mod checkpoint;
mod entropy;
mod linear;
mod model;
mod norm;
mod sample;

pub use checkpoint::{
    load_model, model_entries, model_from_entries, read_archive, save_model, write_archive,
    ArrayEntry, EntryData, CKPT_MAGIC, CKPT_VERSION,
};
pub use entropy::{sequence_entropy, token_entropies};
pub use linear::{BaseWeight, LinearGrads, LoraAdapter, QuantLinear};
pub use model::{
    Block, BlockGrads, ForwardCache, ModelConfig, ModelGrads, ParamGroup, PolicyModel, SeqBatch,
    LINEAR_NAMES,
};
pub use norm::NoisyRmsNorm;
pub use sample::{log_softmax, Completion, SamplingParams, GREEDY_TEMPERATURE};

use crate::quant::QuantError;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} input columns, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("LoRA rank {rank} exceeds limit {limit} (r <= min(d, k)/2)")]
    InvalidRank { rank: usize, limit: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("base weights are quantized and frozen")]
    FrozenBase,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
