//! Toy-scale reference transformer layer with LoRA-adapted Q/K/V projections.
//!
//! Everything here is plain `f32` value code. Other modules use it as the
//! numeric oracle: the batched kernels must agree with [`LoraPair::delta`],
//! and the CPU-assisted split prefill must agree with [`ToyModel::prefill`].

mod lora;
mod matrix;
mod model;

use thiserror::Error;

pub use lora::{byte_size_for, lora_apply, AdapterId, LoraAdapter, LoraPair, Target};
pub use matrix::Matrix;
pub use model::{
    attend_and_mlp, attention, decode_step, generate, prefill_layer, project_qkv, softmax_rows, Generation, KvCache,
    LayerCache, LayerWeights, ToyModel, ToyModelConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape mismatch on {operand}: expected {expected:?}, got {actual:?}")]
    Shape { operand: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("non-finite intermediate in layer {layer} ({stage})")]
    Numeric { layer: usize, stage: &'static str },
    #[error("cache state error: {0}")]
    State(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
