//! JSON checkpoints. Base weights and adapters live in separate files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraPair, LoraTarget};
use super::params::{ModelConfig, ModelParams};
use super::tensor::Matrix;
use super::ModelError;
use crate::tokenizer::TokenizerKind;

pub const CHECKPOINT_VERSION: &str = "flowdetect-ckpt/1";

/// What the model was trained against, so eval can rebuild the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMeta {
    pub kind: TokenizerKind,
    pub seq_len: usize,
    /// Quantization tag for NSS vocabularies (`raw`, `log-bucket:10`).
    pub quantization: Option<String>,
    /// Vocabulary file name, relative to the checkpoint.
    pub vocab_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub version: String,
    pub config: ModelConfig,
    pub tokenizer: Option<TokenizerMeta>,
    pub params: ModelParams<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterEntry {
    layer: usize,
    target: LoraTarget,
    a: Matrix<f32>,
    b: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterFile {
    pub version: String,
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
    entries: Vec<AdapterEntry>,
}

impl AdapterFile {
    pub fn from_adapter(adapter: &LoraAdapter<f32>) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            rank: adapter.rank,
            scale: adapter.scale,
            targets: adapter.targets.clone(),
            entries: adapter
                .pairs
                .iter()
                .map(|(&(layer, target), p)| AdapterEntry {
                    layer,
                    target,
                    a: p.a.clone(),
                    b: p.b.clone(),
                })
                .collect(),
        }
    }

    pub fn into_adapter(self) -> LoraAdapter<f32> {
        LoraAdapter {
            rank: self.rank,
            scale: self.scale,
            targets: self.targets,
            pairs: self
                .entries
                .into_iter()
                .map(|e| ((e.layer, e.target), LoraPair { a: e.a, b: e.b }))
                .collect(),
        }
    }
}

fn check_version(found: &str) -> Result<(), ModelError> {
    if found != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {found:?}, expected {CHECKPOINT_VERSION:?}"
        )));
    }
    Ok(())
}

fn check_tensor_shapes(params: &ModelParams<f32>) -> Result<(), ModelError> {
    params.config.validate()?;
    let expected = ModelParams::<f32>::zeros(&params.config);
    if params.layers.len() != expected.layers.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} layers stored, config says {}",
            params.layers.len(),
            expected.layers.len()
        )));
    }
    for (got, want) in params.named().into_iter().zip(expected.named()) {
        if got.tensor.shape() != want.tensor.shape() || got.tensor.len() != got.tensor.data.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                got.name,
                got.tensor.shape(),
                want.tensor.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    tokenizer: Option<TokenizerMeta>,
) -> Result<(), ModelError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        config: params.config,
        tokenizer,
        params: params.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile, ModelError> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    check_version(&file.version)?;
    if file.config != file.params.config {
        return Err(ModelError::Checkpoint("config block disagrees with tensors".into()));
    }
    check_tensor_shapes(&file.params)?;
    Ok(file)
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter<f32>) -> Result<(), ModelError> {
    let text = serde_json::to_string(&AdapterFile::from_adapter(adapter))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Loads an adapter and checks it fits `params`.
pub fn load_adapter(path: &Path, params: &ModelParams<f32>) -> Result<LoraAdapter<f32>, ModelError> {
    let text = fs::read_to_string(path)?;
    let file: AdapterFile =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    check_version(&file.version)?;
    let adapter = file.into_adapter();
    adapter.check_shapes(params)?;
    Ok(adapter)
}
