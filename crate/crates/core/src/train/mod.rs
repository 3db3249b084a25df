//! Fine-tuning, evaluation, and the ablation and robustness sweeps.

mod ablation;
mod early_stop;
mod eval;
mod metrics;
mod optim;
mod robustness;
mod sft;
mod table;

pub use ablation::{ablation_run, AblationData, AblationError, AblationFlags, AblationRow, AblationSettings};
pub use early_stop::{EarlyStopper, StopDecision};
pub use eval::{evaluate, inference_params, predict, EvalError, EVAL_BATCH};
pub use metrics::{config_hash, f1_score, Confusion, EvalReport, Metrics, RunMeta};
pub use optim::{trainable_mut, Adam};
pub use robustness::{family_specs, robustness_run, RobustnessError};
pub use sft::{
    argmax, sft_train, split_loss_and_accuracy, train_on_records, EncodedSplit, EpochRecord, TrainConfig,
    TrainError, TrainMode, TrainOutcome, TrainedModel, PRETRAINED_LR,
};
pub use table::{render_ablation, render_reports, render_stats};
