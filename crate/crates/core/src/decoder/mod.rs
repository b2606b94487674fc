//! Autoregressive transformer decoder over patch-feature memory.
//!
//! Layout per layer (post-norm): masked self-attention, cross-attention over
//! the projected feature memory, then a ReLU feed-forward block. Each
//! sub-layer output goes through dropout (training only), a residual add and
//! a layer norm. Gradients are hand-derived; see [`forward`].

pub mod forward;
mod generate;
mod model;
pub mod ops;
mod tokenizer;
pub mod train;

use thiserror::Error;

use crate::codec::CodecError;

pub use forward::{cross_entropy_loss, decoder_forward, feature_rows, project_features, Logits, Mode};
pub use generate::{generate_from_features, greedy_decode};
pub use model::{DecoderLayer, DecoderModel, LayerNorm, Linear, MultiHeadAttention, TensorKind, TensorSpec};
pub use ops::{attention, causal_mask, positional_encoding, Matrix};
pub use tokenizer::Vocab;
pub use train::{
    evaluate_loss, loss_and_gradients, lr_schedule, train, train_step, AdamW, Batch, EpochLog, TrainConfig, TrainExample,
};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Number of reserved ids preceding content tokens.
pub const RESERVED_IDS: u32 = 4;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention row {row} has every key masked")]
    AllMasked { row: usize },
    #[error("every memory row is padded")]
    AllMemoryPadded,
    #[error("every target position is padding")]
    AllPadTargets,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("empty memory")]
    EmptyMemory,
    #[error("vocabulary file line {line}: {message}")]
    Vocab { line: usize, message: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DecoderError {
    pub fn is_io(&self) -> bool {
        matches!(self, DecoderError::Io { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab: usize,
    pub feat_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 1024,
            d_ff: 2048,
            dropout: 0.1,
            max_len: 64,
            vocab: 42_384,
            feat_dim: 1024,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::Config(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even for sinusoidal positions", self.d_model));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab <= RESERVED_IDS as usize || self.feat_dim == 0 || self.d_ff == 0 || self.layers == 0 {
            return bad("layers, d_ff, feat_dim must be positive and vocab must exceed the reserved ids".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
