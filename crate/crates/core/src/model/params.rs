use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, Scalar};
use super::ModelError;
use crate::tokenizer::MAX_SEQ_CAP;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: d_model 64, 2 layers, 4 heads, d_ff 128.
    pub fn new(vocab_size: usize, max_seq: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq,
            n_classes: 2,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq == 0 || self.max_seq > MAX_SEQ_CAP {
            return bad(format!("max_seq {} outside 1..=512", self.max_seq));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one pre-norm encoder block. Projections are `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
}

/// Field names of [`LayerParams`] in storage order, with whether L2 applies.
pub(crate) const LAYER_FIELDS: [(&str, bool); 16] = [
    ("wq", true),
    ("bq", false),
    ("wk", true),
    ("bk", false),
    ("wv", true),
    ("bv", false),
    ("wo", true),
    ("bo", false),
    ("w1", true),
    ("b1", false),
    ("w2", true),
    ("b2", false),
    ("ln1_g", false),
    ("ln1_b", false),
    ("ln2_g", false),
    ("ln2_b", false),
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&Matrix<T>; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.w1,
            &self.b1, &self.w2, &self.b2, &self.ln1_g, &self.ln1_b, &self.ln2_g, &self.ln2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix<T>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Classifier head, `n_classes x d_model`.
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

/// A named parameter tensor.
pub struct Named<M> {
    pub name: String,
    pub tensor: M,
    /// Whether the L2 penalty applies.
    pub decay: bool,
}

impl<M> Named<M> {
    pub(crate) fn new(name: String, tensor: M, decay: bool) -> Self {
        Self { name, tensor, decay }
    }
}

pub const HEAD_W: &str = "head_w";
pub const HEAD_B: &str = "head_b";

impl<T: Scalar> ModelParams<T> {
    /// Zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerParams {
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            w1: Matrix::zeros(config.d_ff, d),
            b1: Matrix::zeros(1, config.d_ff),
            w2: Matrix::zeros(d, config.d_ff),
            b2: Matrix::zeros(1, d),
            ln1_g: Matrix::zeros(1, d),
            ln1_b: Matrix::zeros(1, d),
            ln2_g: Matrix::zeros(1, d),
            ln2_b: Matrix::zeros(1, d),
        };
        Self {
            config: *config,
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            head_w: Matrix::zeros(config.n_classes, d),
            head_b: Matrix::zeros(1, config.n_classes),
        }
    }

    /// All tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<Named<&Matrix<T>>> {
        let mut out = vec![
            Named::new("tok_emb".into(), &self.tok_emb, true),
            Named::new("pos_emb".into(), &self.pos_emb, true),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for ((field, decay), m) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push(Named::new(format!("layers.{i}.{field}"), m, *decay));
            }
        }
        out.push(Named::new(HEAD_W.into(), &self.head_w, true));
        out.push(Named::new(HEAD_B.into(), &self.head_b, false));
        out
    }

    pub fn named_mut(&mut self) -> Vec<Named<&mut Matrix<T>>> {
        let mut out = vec![
            Named::new("tok_emb".into(), &mut self.tok_emb, true),
            Named::new("pos_emb".into(), &mut self.pos_emb, true),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for ((field, decay), m) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push(Named::new(format!("layers.{i}.{field}"), m, *decay));
            }
        }
        out.push(Named::new(HEAD_W.into(), &mut self.head_w, true));
        out.push(Named::new(HEAD_B.into(), &mut self.head_b, false));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|n| n.tensor.len()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head_w.len() + self.head_b.len()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|n| n.tensor.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for (dst, src) in out.named_mut().into_iter().zip(self.named()) {
            *dst.tensor = src.tensor.cast();
        }
        out
    }
}

/// Deterministic initialization: LeCun-uniform projections, uniform
/// embeddings, zero biases and unit layer-norm gains.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<T>::zeros(config);
    for n in params.named_mut() {
        let field = n.name.rsplit('.').next().unwrap_or(&n.name);
        let bound = match field {
            "tok_emb" | "pos_emb" => Some(0.5),
            "ln1_g" | "ln2_g" => {
                n.tensor.data.iter_mut().for_each(|x| *x = T::one());
                None
            }
            _ if n.decay => Some((3.0 / n.tensor.cols as f64).sqrt()),
            _ => None,
        };
        if let Some(a) = bound {
            for x in &mut n.tensor.data {
                *x = T::of(rng.gen_range(-a..a));
            }
        }
    }
    Ok(params)
}
