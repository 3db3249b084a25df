//! Low-rank adapters: an adapted projection computes `W0 x + B A x`, with
//! `W0` frozen and only the rank-r factors trained. Merging folds `B A`
//! into `W0` so inference needs no extra work.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, Named};
use super::tensor::{Matrix, Scalar};
use super::ModelError;

/// Projection inside an encoder block that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

impl LoraTarget {
    pub const DEFAULT: [LoraTarget; 2] = [LoraTarget::Query, LoraTarget::Value];

    pub fn field(self) -> &'static str {
        match self {
            LoraTarget::Query => "wq",
            LoraTarget::Key => "wk",
            LoraTarget::Value => "wv",
            LoraTarget::Output => "wo",
            LoraTarget::FfIn => "w1",
            LoraTarget::FfOut => "w2",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
            LoraTarget::FfIn => "ff_in",
            LoraTarget::FfOut => "ff_out",
        })
    }
}

impl FromStr for LoraTarget {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "query" | "wq" => Ok(LoraTarget::Query),
            "k" | "key" | "wk" => Ok(LoraTarget::Key),
            "v" | "value" | "wv" => Ok(LoraTarget::Value),
            "o" | "output" | "wo" => Ok(LoraTarget::Output),
            "ff_in" | "w1" => Ok(LoraTarget::FfIn),
            "ff_out" | "w2" => Ok(LoraTarget::FfOut),
            other => Err(ModelError::InvalidConfig(format!("unknown LoRA target `{other}`"))),
        }
    }
}

pub(crate) fn base_matrix<T>(params: &ModelParams<T>, layer: usize, target: LoraTarget) -> &Matrix<T> {
    let l = &params.layers[layer];
    match target {
        LoraTarget::Query => &l.wq,
        LoraTarget::Key => &l.wk,
        LoraTarget::Value => &l.wv,
        LoraTarget::Output => &l.wo,
        LoraTarget::FfIn => &l.w1,
        LoraTarget::FfOut => &l.w2,
    }
}

fn base_matrix_mut<T>(params: &mut ModelParams<T>, layer: usize, target: LoraTarget) -> &mut Matrix<T> {
    let l = &mut params.layers[layer];
    match target {
        LoraTarget::Query => &mut l.wq,
        LoraTarget::Key => &mut l.wk,
        LoraTarget::Value => &mut l.wv,
        LoraTarget::Output => &mut l.wo,
        LoraTarget::FfIn => &mut l.w1,
        LoraTarget::FfOut => &mut l.w2,
    }
}

/// Factors for one adapted `d x k` matrix: `a` is `r x k`, `b` is `d x r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> LoraPair<T> {
    /// `B A`, the `d x k` weight update.
    pub fn delta(&self) -> Matrix<T> {
        self.b.matmul(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    /// Multiplier on `B A`; 1 unless an `alpha / r` scaling was requested.
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
    /// Keyed by (layer, target).
    pub pairs: BTreeMap<(usize, LoraTarget), LoraPair<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn pair(&self, layer: usize, target: LoraTarget) -> Option<&LoraPair<T>> {
        self.pairs.get(&(layer, target))
    }

    /// Factor tensors named `lora.layers.{i}.{field}.{a|b}`.
    pub fn named(&self) -> Vec<Named<&Matrix<T>>> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for ((layer, target), p) in &self.pairs {
            let stem = format!("lora.layers.{layer}.{}", target.field());
            out.push(Named::new(format!("{stem}.a"), &p.a, true));
            out.push(Named::new(format!("{stem}.b"), &p.b, true));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<Named<&mut Matrix<T>>> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for ((layer, target), p) in &mut self.pairs {
            let stem = format!("lora.layers.{layer}.{}", target.field());
            out.push(Named::new(format!("{stem}.a"), &mut p.a, true));
            out.push(Named::new(format!("{stem}.b"), &mut p.b, true));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.scale = alpha / self.rank as f64;
        self
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            rank: self.rank,
            scale: self.scale,
            targets: self.targets.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|(k, p)| {
                    (
                        *k,
                        LoraPair {
                            a: p.a.cast(),
                            b: p.b.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn check_shapes(&self, params: &ModelParams<T>) -> Result<(), ModelError> {
        for (&(layer, target), p) in &self.pairs {
            if layer >= params.layers.len() {
                return Err(ModelError::ShapeMismatch(format!("adapter layer {layer} out of range")));
            }
            let w = base_matrix(params, layer, target);
            if p.a.shape() != (self.rank, w.cols) || p.b.shape() != (w.rows, self.rank) {
                return Err(ModelError::ShapeMismatch(format!(
                    "adapter {layer}.{target}: A {:?}, B {:?} vs W {:?}",
                    p.a.shape(),
                    p.b.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Allocates adapters on `targets` in every layer: `B = 0`, `A` uniform with
/// variance `1/k`.
pub fn attach_lora<T: Scalar>(
    params: &ModelParams<T>,
    rank: usize,
    targets: &[LoraTarget],
    seed: u64,
) -> Result<LoraAdapter<T>, ModelError> {
    if rank == 0 {
        return Err(ModelError::InvalidConfig("LoRA rank must be at least 1".into()));
    }
    if targets.is_empty() {
        return Err(ModelError::InvalidConfig("LoRA needs at least one target".into()));
    }
    let mut targets = targets.to_vec();
    targets.sort();
    targets.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = BTreeMap::new();
    for layer in 0..params.layers.len() {
        for &target in &targets {
            let w = base_matrix(params, layer, target);
            let (d, k) = w.shape();
            if rank * 4 > d.min(k) {
                return Err(ModelError::RankTooLarge {
                    rank,
                    max: d.min(k) / 4,
                });
            }
            let bound = (3.0 / k as f64).sqrt();
            let a = Matrix::from_vec(
                rank,
                k,
                (0..rank * k).map(|_| T::of(rng.gen_range(-bound..bound))).collect(),
            );
            pairs.insert((layer, target), LoraPair { a, b: Matrix::zeros(d, rank) });
        }
    }
    Ok(LoraAdapter {
        rank,
        scale: 1.0,
        targets,
        pairs,
    })
}

/// New params with every adapted matrix replaced by `W0 + scale * B A`.
pub fn merge_lora<T: Scalar>(params: &ModelParams<T>, adapter: &LoraAdapter<T>) -> Result<ModelParams<T>, ModelError> {
    adapter.check_shapes(params)?;
    let mut merged = params.clone();
    let scale = T::of(adapter.scale);
    for (&(layer, target), pair) in &adapter.pairs {
        let mut delta = pair.delta();
        if adapter.scale != 1.0 {
            delta.scale(scale);
        }
        base_matrix_mut(&mut merged, layer, target).add_assign(&delta);
    }
    Ok(merged)
}
