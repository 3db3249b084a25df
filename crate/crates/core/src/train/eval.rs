use std::time::Instant;

use thiserror::Error;

use super::metrics::{Confusion, EvalReport, RunMeta};
use super::sft::{argmax, TrainedModel};
use crate::ingest::{FlowRecord, Label};
use crate::model::{forward, merge_lora, ModelError, ModelParams};
use crate::tokenizer::{FlowTokenizer, TokenSequence};

pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weights to run inference with: adapters are merged into the base.
pub fn inference_params(model: &TrainedModel) -> Result<ModelParams<f32>, ModelError> {
    match &model.adapter {
        Some(a) => merge_lora(&model.params, a),
        None => Ok(model.params.clone()),
    }
}

/// Arg-max labels for already encoded sequences.
pub fn predict(params: &ModelParams<f32>, seqs: &[TokenSequence]) -> Result<Vec<Label>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let logits = forward(params, None, chunk, false, 0)?;
        for i in 0..chunk.len() {
            let row: Vec<f64> = logits.row(i).iter().map(|&z| z as f64).collect();
            out.push(Label::from_class_index(argmax(&row)));
        }
    }
    Ok(out)
}

/// Tokenizes `test` with the frozen training tokenizer and scores it.
pub fn evaluate(
    model: &TrainedModel,
    tokenizer: &FlowTokenizer,
    test: &[FlowRecord],
    dataset: &str,
    perturbation: Option<String>,
    meta: &RunMeta,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let started = Instant::now();
    let params = inference_params(model)?;
    let seqs = tokenizer.encode_all(test);
    let predicted = predict(&params, &seqs)?;
    let truth: Vec<Label> = test.iter().map(|r| r.label).collect();
    let mut report = EvalReport::new(dataset, Confusion::from_labels(&predicted, &truth), perturbation, meta.clone());
    report.wall_seconds = Some(started.elapsed().as_secs_f64());
    Ok(report)
}
