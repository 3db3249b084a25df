//! Small transformer encoder classifier with optional low-rank adapters.

mod checkpoint;
mod forward;
mod lora;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{
    load_adapter, load_checkpoint, save_adapter, save_checkpoint, AdapterFile, CheckpointFile, TokenizerMeta,
    CHECKPOINT_VERSION,
};
pub use forward::{
    attention_maps, forward, loss_and_grads, masked_softmax, trainable_count, trainable_names, Gradients,
    LossOptions,
};
pub use lora::{attach_lora, merge_lora, LoraAdapter, LoraPair, LoraTarget};
pub use params::{init_model, LayerParams, ModelConfig, ModelParams, Named, HEAD_B, HEAD_W};
pub use tensor::{Matrix, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} outside 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("LoRA rank {rank} exceeds min(k, d)/4 = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
