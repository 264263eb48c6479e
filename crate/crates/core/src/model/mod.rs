//! A small pre-norm decoder-only transformer with explicit reverse-mode
//! gradients.
//!
//! Matrices follow the `out × in` convention, so a projection computes
//! `y = x Wᵀ` on row-major activations of shape `positions × features`.

mod checkpoint;
mod generate;
mod transformer;
pub mod tokenizer;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_FORMAT_VERSION};
pub use generate::{forward_last, generate_greedy};
pub use tokenizer::Tokenizer;
pub use transformer::{
    backward, forward, forward_train, softmax_rows, ForwardCache, Gradients, LayerWeights, MatrixId,
    TransformerWeights,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
}

impl ModelConfig {
    /// Default desk-scale shape for a given vocabulary.
    pub fn standard(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context_length: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context_length", self.context_length),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of scalar parameters in the base model.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d + 4 * d * d + 2 * d * self.d_ff + self.d_ff + d;
        2 * self.vocab_size * d + self.context_length * d + self.n_layers * per_layer + 2 * d
    }
}
