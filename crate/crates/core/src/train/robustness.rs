//! Clean-versus-perturbed evaluation of a model trained on clean data.

use thiserror::Error;

use super::eval::{evaluate, EvalError};
use super::metrics::{EvalReport, RunMeta};
use super::sft::TrainedModel;
use crate::ingest::{column_kinds, FlowTable, IngestError};
use crate::perturb::{perturb_table_with_stats, NoiseKind, PerturbError, PerturbSpec, Scale};
use crate::tokenizer::FlowTokenizer;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// One spec per noise family, all at `scale`.
pub fn family_specs(scale: Scale, seed: u64, round: bool) -> Vec<PerturbSpec> {
    NoiseKind::ALL
        .into_iter()
        .map(|kind| PerturbSpec {
            round,
            ..PerturbSpec::new(kind, scale, seed)
        })
        .collect()
}

/// A clean report followed by one report per spec, all over the same records
/// in the same order. `train_stds` supplies the deviations used by
/// `Scale::Auto`; without it the clean table's own are used.
pub fn robustness_run(
    model: &TrainedModel,
    tokenizer: &FlowTokenizer,
    clean: &FlowTable,
    specs: &[PerturbSpec],
    train_stds: Option<&[f64]>,
    meta: &RunMeta,
) -> Result<Vec<EvalReport>, RobustnessError> {
    let name = clean.schema.dataset_name.as_str();
    let mut reports = vec![evaluate(model, tokenizer, &clean.records, name, None, meta)?];
    let kinds = column_kinds(clean)?;
    for spec in specs {
        let noisy = perturb_table_with_stats(clean, spec, &kinds, train_stds)?;
        reports.push(evaluate(
            model,
            tokenizer,
            &noisy.table.records,
            name,
            Some(spec.summary()),
            meta,
        )?);
    }
    Ok(reports)
}
