//! A small causal character-level transformer providing `log π(y|x)` and
//! decoding for both translation directions.

mod decode;
mod graph;
mod infer;
mod model;
mod vocab;

pub use decode::{greedy_decode, greedy_decode_cached, sample_decode};
pub use graph::PolicyGraph;
pub use infer::{score_with_cache, sequence_logprob, KvCache};
pub use model::{init_params, ModelConfig, PolicyParams};
pub use vocab::{TokenId, Vocab, BOS, EOS, NUM_SPECIALS, PAD, SEP};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    Oov { ch: char, offset: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence needs {needed} positions but the context holds {context}")]
    Length { needed: usize, context: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Target tokens up to and including the first EOS.
pub(crate) fn effective_target(y: &[TokenId]) -> &[TokenId] {
    match y.iter().position(|&t| t == EOS) {
        Some(i) => &y[..=i],
        None => y,
    }
}
