//! Net-flow intrusion detection with a traffic-aware tokenizer and a small
//! LoRA-tunable transformer encoder.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`ingest`] parses heterogeneous CSV datasets into schema-tagged tables.
//! 2. [`mix`] samples a joint training corpus with disjoint per-source test sets.
//! 3. [`tokenizer`] maps each feature value to one token (or, for comparison,
//!    runs a subword tokenizer over the flow's text form).
//! 4. [`model`] is the encoder classifier with optional low-rank adapters.
//! 5. [`train`] fine-tunes, evaluates, and runs ablation and robustness sweeps;
//!    [`perturb`] supplies the test-time noise.

pub mod ingest;
pub mod mix;
pub mod model;
pub mod perturb;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use ingest::{FlowRecord, FlowTable, Label, Schema};
pub use tokenizer::{FlowTokenizer, TokenSequence, TokenizerKind};
