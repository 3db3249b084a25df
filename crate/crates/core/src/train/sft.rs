//! Supervised fine-tuning with Adam, validation each epoch and early stopping.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::early_stop::{EarlyStopper, StopDecision};
use super::optim::{trainable_mut, Adam};
use crate::ingest::FlowRecord;
use crate::model::{
    attach_lora, forward, init_model, loss_and_grads, trainable_count, LoraAdapter, LoraTarget, LossOptions,
    ModelConfig, ModelError, ModelParams,
};
use crate::tokenizer::{FlowTokenizer, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullFt,
    Lora,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::FullFt => "full_ft",
            TrainMode::Lora => "lora",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "full_ft" | "full-ft" => Ok(TrainMode::FullFt),
            "lora" => Ok(TrainMode::Lora),
            other => Err(format!("unknown training mode `{other}` (full-ft | lora)")),
        }
    }
}

/// The learning rate used in the original BERT fine-tuning setup; too small
/// for an encoder trained from scratch, kept available by flag.
pub const PRETRAINED_LR: f64 = 2e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub l2_coeff: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub lora_rank: usize,
    pub lora_targets: Vec<LoraTarget>,
    /// When set, the adapter update is scaled by `alpha / rank`.
    pub lora_alpha: Option<f64>,
    pub class_weights: Option<Vec<f64>>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 10,
            l2_coeff: 1e-4,
            early_stop_patience: 2,
            seed: 0,
            mode: TrainMode::Lora,
            lora_rank: 8,
            lora_targets: LoraTarget::DEFAULT.to_vec(),
            lora_alpha: None,
            class_weights: None,
            max_steps: None,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            dropout_p: m.dropout_p,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_coeff >= 0.0) {
            return bad("l2_coeff must be non-negative");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, max_seq: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq,
            n_classes: 2,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams<f32>,
    pub adapter: Option<LoraAdapter<f32>>,
}

impl TrainedModel {
    /// Fresh weights for `cfg`, with an adapter attached in LoRA mode.
    pub fn init(cfg: &TrainConfig, model: &ModelConfig) -> Result<Self, TrainError> {
        let params = init_model::<f32>(model, cfg.seed)?;
        let adapter = match cfg.mode {
            TrainMode::FullFt => None,
            TrainMode::Lora => {
                let a = attach_lora(&params, cfg.lora_rank, &cfg.lora_targets, cfg.seed.wrapping_add(1))?;
                Some(match cfg.lora_alpha {
                    Some(alpha) => a.with_alpha(alpha),
                    None => a,
                })
            }
        };
        Ok(Self { params, adapter })
    }

    pub fn trainable_count(&self) -> usize {
        trainable_count(&self.params, self.adapter.as_ref())
    }
}

/// Token sequences with class indices (normal 0, attack 1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodedSplit {
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

impl EncodedSplit {
    pub fn encode(tokenizer: &FlowTokenizer, records: &[FlowRecord]) -> Self {
        Self {
            seqs: tokenizer.encode_all(records),
            labels: records.iter().map(|r| r.label.class_index()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when there is no validation split.
    pub val_accuracy: Option<f64>,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        /// Best checkpoint seen before the failure (the initial weights if none).
        last_good: Box<TrainedModel>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean unweighted cross-entropy and accuracy in eval mode.
pub fn split_loss_and_accuracy(
    model: &TrainedModel,
    split: &EncodedSplit,
    batch_size: usize,
) -> Result<(f64, f64), ModelError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (seqs, labels) in split.seqs.chunks(batch_size).zip(split.labels.chunks(batch_size)) {
        let logits = forward(&model.params, model.adapter.as_ref(), seqs, false, 0)?;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).iter().map(|&z| z as f64).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
            if argmax(&row) == y {
                correct += 1;
            }
        }
    }
    let n = split.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place of a copy and returns the best-validation weights.
/// Without a validation split the training loss drives early stopping.
pub fn sft_train(
    config: &TrainConfig,
    model: TrainedModel,
    train: &EncodedSplit,
    val: &EncodedSplit,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if (config.mode == TrainMode::Lora) != model.adapter.is_some() {
        return Err(TrainError::InvalidConfig(format!(
            "mode {} but adapter {}",
            config.mode,
            if model.adapter.is_some() { "present" } else { "absent" }
        )));
    }
    let opts = LossOptions {
        train_mode: true,
        dropout_seed: 0,
        l2_coeff: config.l2_coeff,
        class_weights: config.class_weights.clone(),
    };
    let mut current = model;
    let mut best = current.clone();
    let mut opt = Adam::new(config.learning_rate);
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20f);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut steps = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        if config.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| train.seqs[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let opts = LossOptions {
                dropout_seed: dropout_rng.gen(),
                ..opts.clone()
            };
            let (loss, grads) = loss_and_grads(&current.params, current.adapter.as_ref(), &batch, &labels, &opts)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: steps,
                    last_good: Box::new(best),
                });
            }
            let TrainedModel { params, adapter } = &mut current;
            opt.step(trainable_mut(params, adapter.as_mut()), &grads);
            steps += 1;
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (train_loss, None)
        } else {
            let (l, a) = split_loss_and_accuracy(&current, val, config.batch_size)?;
            (l, Some(a))
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            epoch_seconds: started.elapsed().as_secs_f64(),
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = current.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        stopped_early,
        steps,
    })
}

/// Fits a tokenizer on `train` only, then builds and trains a model.
pub fn train_on_records(
    config: &TrainConfig,
    tokenizer: FlowTokenizer,
    train: &[FlowRecord],
    val: &[FlowRecord],
) -> Result<(FlowTokenizer, TrainOutcome), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let train_split = EncodedSplit::encode(&tokenizer, train);
    let val_split = EncodedSplit::encode(&tokenizer, val);
    let model = TrainedModel::init(config, &config.model_config(tokenizer.vocab_size(), tokenizer.seq_len()))?;
    let outcome = sft_train(config, model, &train_split, &val_split)?;
    Ok((tokenizer, outcome))
}
