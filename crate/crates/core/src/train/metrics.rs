//! Confusion counts and derived metrics, attack as the positive class.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// # Panics
    /// If the slices differ in length.
    pub fn from_labels(predicted: &[Label], truth: &[Label]) -> Self {
        assert_eq!(predicted.len(), truth.len(), "prediction/label count");
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (Label::Attack, Label::Attack) => c.tp += 1,
                (Label::Attack, Label::Normal) => c.fp += 1,
                (Label::Normal, Label::Normal) => c.tn += 1,
                (Label::Normal, Label::Attack) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        let mut undefined = Vec::new();
        let mut ratio = |num: u64, den: u64, name: &'static str| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio(self.tp + self.tn, self.total(), "accuracy");
        let precision = ratio(self.tp, self.tp + self.fp, "precision");
        let recall = ratio(self.tp, self.tp + self.fn_, "recall");
        if precision + recall == 0.0 {
            undefined.push("f1".to_string());
        }
        Metrics {
            accuracy,
            precision,
            recall,
            f1: f1_score(precision, recall),
            undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were set to 0.
    pub undefined: Vec<String>,
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Run identification copied into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub mode: String,
    pub tokenizer: String,
    pub learning_rate: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub total: u64,
    #[serde(flatten)]
    pub counts: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics reported as 0 because of a 0/0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_division: Vec<String>,
    pub perturbation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    #[serde(flatten)]
    pub meta: RunMeta,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, counts: Confusion, perturbation: Option<String>, meta: RunMeta) -> Self {
        let m = counts.metrics();
        Self {
            dataset: dataset.into(),
            total: counts.total(),
            counts,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            zero_division: m.undefined,
            perturbation,
            wall_seconds: None,
            meta,
        }
    }

    /// Recomputes the metrics from the counts and compares exactly.
    pub fn is_consistent(&self) -> bool {
        let m = self.counts.metrics();
        self.total == self.counts.total()
            && self.accuracy == m.accuracy
            && self.precision == m.precision
            && self.recall == m.recall
            && self.f1 == m.f1
            && self.zero_division == m.undefined
    }
}

/// Hex SHA-256 of the JSON form of `config`.
pub fn config_hash<S: Serialize>(config: &S) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}
