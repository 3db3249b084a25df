//! Toggling fine-tuning, the per-feature tokenizer and adapters one at a time.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::eval::{evaluate, EvalError};
use super::metrics::{config_hash, EvalReport, RunMeta};
use super::sft::{sft_train, EncodedSplit, TrainConfig, TrainError, TrainMode, TrainedModel};
use crate::ingest::FlowRecord;
use crate::tokenizer::{FlowTokenizer, Quantization, TokenizerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub sft: bool,
    pub nss: bool,
    pub lora: bool,
}

impl AblationFlags {
    /// Untrained baseline plus the four on/off combinations of the tokenizer
    /// and adapters under fine-tuning.
    pub const STANDARD: [AblationFlags; 5] = [
        AblationFlags { sft: false, nss: true, lora: false },
        AblationFlags { sft: true, nss: false, lora: false },
        AblationFlags { sft: true, nss: true, lora: false },
        AblationFlags { sft: true, nss: false, lora: true },
        AblationFlags { sft: true, nss: true, lora: true },
    ];

    pub fn label(&self) -> String {
        let on = |b: bool| if b { "+" } else { "-" };
        format!("{}SFT {}NSS {}LoRA", on(self.sft), on(self.nss), on(self.lora))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub trainable_params: usize,
    pub epochs: usize,
    pub train_seconds: f64,
    pub seconds_per_epoch: f64,
    pub report: EvalReport,
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub struct AblationData<'a> {
    pub name: &'a str,
    pub train: &'a [FlowRecord],
    pub val: &'a [FlowRecord],
    pub test: &'a [FlowRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub train: TrainConfig,
    pub quantization: Quantization,
    pub subword_vocab: usize,
}

/// One evaluated row per entry of `combos`. Every row starts from the same
/// seed; tokenizers are fitted on `data.train` only.
pub fn ablation_run(
    data: &AblationData<'_>,
    combos: &[AblationFlags],
    settings: &AblationSettings,
) -> Result<Vec<AblationRow>, AblationError> {
    let nss = FlowTokenizer::fit_nss(data.train, settings.quantization)?;
    let subword = FlowTokenizer::fit_subword(data.train, settings.subword_vocab)?;
    let mut rows = Vec::with_capacity(combos.len());
    for &flags in combos {
        let tokenizer = if flags.nss { &nss } else { &subword };
        let cfg = TrainConfig {
            mode: if flags.lora { TrainMode::Lora } else { TrainMode::FullFt },
            ..settings.train.clone()
        };
        let model_cfg = cfg.model_config(tokenizer.vocab_size(), tokenizer.seq_len());
        let mut model = TrainedModel::init(&cfg, &model_cfg)?;
        let trainable_params = model.trainable_count();
        let (mut epochs, mut train_seconds) = (0, 0.0);
        if flags.sft {
            let started = Instant::now();
            let train = EncodedSplit::encode(tokenizer, data.train);
            let val = EncodedSplit::encode(tokenizer, data.val);
            let out = sft_train(&cfg, model, &train, &val)?;
            train_seconds = started.elapsed().as_secs_f64();
            epochs = out.history.len();
            model = out.model;
        }
        let meta = RunMeta {
            seed: cfg.seed,
            mode: if flags.sft { cfg.mode.to_string() } else { "untrained".into() },
            tokenizer: tokenizer.kind().to_string(),
            learning_rate: cfg.learning_rate,
            config_hash: config_hash(&(&cfg, flags)),
        };
        let report = evaluate(&model, tokenizer, data.test, data.name, None, &meta)?;
        rows.push(AblationRow {
            flags,
            seq_len: tokenizer.seq_len(),
            vocab_size: tokenizer.vocab_size(),
            trainable_params,
            epochs,
            train_seconds,
            seconds_per_epoch: if epochs > 0 { train_seconds / epochs as f64 } else { 0.0 },
            report,
        });
    }
    Ok(rows)
}
