//! Forward pass, cross-entropy loss and reverse-mode gradients.
//!
//! Each sequence is processed independently (no cross-row reductions), so a
//! row's logits do not depend on what else is in the batch.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lora::{LoraAdapter, LoraPair, LoraTarget};
use super::params::{LayerParams, ModelParams, HEAD_B, HEAD_W};
use super::tensor::{axpy, dot, Matrix, Scalar};
use super::ModelError;
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Options for [`loss_and_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    pub train_mode: bool,
    pub dropout_seed: u64,
    pub l2_coeff: f64,
    /// Per-class loss weights; all ones when `None`.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            train_mode: false,
            dropout_seed: 0,
            l2_coeff: 0.0,
            class_weights: None,
        }
    }
}

/// Gradients of the trainable tensors, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Matrix::all_finite)
    }
}

struct Linear<'a, T> {
    w: &'a Matrix<T>,
    b: &'a Matrix<T>,
    lora: Option<&'a LoraPair<T>>,
    scale: T,
}

impl<'a, T: Scalar> Linear<'a, T> {
    fn new(
        w: &'a Matrix<T>,
        b: &'a Matrix<T>,
        adapter: Option<&'a LoraAdapter<T>>,
        layer: usize,
        target: LoraTarget,
    ) -> Self {
        Self {
            w,
            b,
            lora: adapter.and_then(|a| a.pair(layer, target)),
            scale: T::of(adapter.map_or(1.0, |a| a.scale)),
        }
    }

    /// `x W^T + b (+ s (x A^T) B^T)`; also returns `x A^T` for backward.
    fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, Option<Matrix<T>>) {
        let mut y = x.matmul_nt(self.w);
        y.add_row_broadcast(self.b);
        let t = self.lora.map(|p| {
            let t = x.matmul_nt(&p.a);
            let mut up = t.matmul_nt(&p.b);
            if self.scale != T::one() {
                up.scale(self.scale);
            }
            y.add_assign(&up);
            t
        });
        (y, t)
    }

    fn backward(
        &self,
        x: &Matrix<T>,
        t: Option<&Matrix<T>>,
        dy: &Matrix<T>,
        base_grads: Option<(&mut Matrix<T>, &mut Matrix<T>)>,
        lora_grads: Option<&mut LoraPair<T>>,
    ) -> Matrix<T> {
        if let Some((gw, gb)) = base_grads {
            dy.add_matmul_tn_into(x, gw);
            dy.add_col_sums_into(gb);
        }
        let mut dx = dy.matmul(self.w);
        if let (Some(p), Some(t)) = (self.lora, t) {
            let mut dys = dy.clone();
            if self.scale != T::one() {
                dys.scale(self.scale);
            }
            let dt = dys.matmul(&p.b);
            if let Some(g) = lora_grads {
                dys.add_matmul_tn_into(t, &mut g.b);
                dt.add_matmul_tn_into(x, &mut g.a);
            }
            dx.add_assign(&dt.matmul(&p.a));
        }
        dx
    }
}

struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

fn ln_forward<T: Scalar>(x: &Matrix<T>, g: &Matrix<T>, b: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
    let n = T::of(x.cols as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for c in 0..x.cols {
            let xh = (row[c] - mean) * is;
            *xhat.at_mut(r, c) = xh;
            *y.at_mut(r, c) = g.data[c] * xh + b.data[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    g: &Matrix<T>,
    grads: Option<(&mut Matrix<T>, &mut Matrix<T>)>,
) -> Matrix<T> {
    let n = T::of(dy.cols as f64);
    if let Some((gg, gb)) = grads {
        for r in 0..dy.rows {
            for c in 0..dy.cols {
                gg.data[c] = gg.data[c] + dy.at(r, c) * cache.xhat.at(r, c);
                gb.data[c] = gb.data[c] + dy.at(r, c);
            }
        }
    }
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let xh = cache.xhat.row(r);
        let dxh: Vec<T> = dy.row(r).iter().zip(&g.data).map(|(&d, &gi)| d * gi).collect();
        let sum = dxh.iter().fold(T::zero(), |a, &v| a + v);
        let sum_x = dot(&dxh, xh);
        let k = cache.inv_std[r] / n;
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = k * (n * dxh[c] - sum - xh[c] * sum_x);
        }
    }
    dx
}

fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * u * u)
}

fn dropout_mask<T: Scalar>(rng: &mut Option<ChaCha8Rng>, len: usize, p: f64) -> Option<Vec<T>> {
    let rng = rng.as_mut()?;
    let keep = T::of(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(m: &mut Matrix<T>, mask: &Option<Vec<T>>) {
    if let Some(mask) = mask {
        for (x, &k) in m.data.iter_mut().zip(mask) {
            *x = *x * k;
        }
    }
}

fn head_slice<T: Scalar>(m: &Matrix<T>, h: usize, dh: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows, dh);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_slice<T: Scalar>(m: &mut Matrix<T>, part: &Matrix<T>, h: usize, dh: usize) {
    for r in 0..m.rows {
        for (dst, &src) in m.row_mut(r)[h * dh..(h + 1) * dh].iter_mut().zip(part.row(r)) {
            *dst = *dst + src;
        }
    }
}

/// Row-wise softmax of `q k^T * scale` over unmasked keys. Masked keys get
/// exactly zero weight; a row with no visible key is all zeros.
pub fn masked_softmax<T: Scalar>(scores: &mut Matrix<T>, mask: &[u8]) {
    for r in 0..scores.rows {
        let row = scores.row_mut(r);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m != 0)
            .map(|(&s, _)| s)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (x, &m) in row.iter_mut().zip(mask) {
            *x = if m != 0 { (*x - max).exp() } else { T::zero() };
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    h1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    tq: Option<Matrix<T>>,
    tk: Option<Matrix<T>>,
    tv: Option<Matrix<T>>,
    probs: Vec<Matrix<T>>,
    attn: Matrix<T>,
    to: Option<Matrix<T>>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    h2: Matrix<T>,
    u: Matrix<T>,
    t1: Option<Matrix<T>>,
    g: Matrix<T>,
    t2: Option<Matrix<T>>,
    drop2: Option<Vec<T>>,
}

struct SeqCache<T> {
    layers: Vec<LayerCache<T>>,
    cls: Vec<T>,
}

struct Linears<'a, T> {
    q: Linear<'a, T>,
    k: Linear<'a, T>,
    v: Linear<'a, T>,
    o: Linear<'a, T>,
    ff1: Linear<'a, T>,
    ff2: Linear<'a, T>,
}

fn linears<'a, T: Scalar>(lp: &'a LayerParams<T>, adapter: Option<&'a LoraAdapter<T>>, l: usize) -> Linears<'a, T> {
    Linears {
        q: Linear::new(&lp.wq, &lp.bq, adapter, l, LoraTarget::Query),
        k: Linear::new(&lp.wk, &lp.bk, adapter, l, LoraTarget::Key),
        v: Linear::new(&lp.wv, &lp.bv, adapter, l, LoraTarget::Value),
        o: Linear::new(&lp.wo, &lp.bo, adapter, l, LoraTarget::Output),
        ff1: Linear::new(&lp.w1, &lp.b1, adapter, l, LoraTarget::FfIn),
        ff2: Linear::new(&lp.w2, &lp.b2, adapter, l, LoraTarget::FfOut),
    }
}

fn validate<T: Scalar>(
    params: &ModelParams<T>,
    adapter: Option<&LoraAdapter<T>>,
    batch: &[TokenSequence],
) -> Result<(), ModelError> {
    let cfg = &params.config;
    for (i, seq) in batch.iter().enumerate() {
        if seq.ids.len() != cfg.max_seq || seq.mask.len() != seq.ids.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence {i}: {} ids / {} mask entries, model expects {}",
                seq.ids.len(),
                seq.mask.len(),
                cfg.max_seq
            )));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    if let Some(a) = adapter {
        a.check_shapes(params)?;
    }
    Ok(())
}

fn forward_seq<T: Scalar>(
    params: &ModelParams<T>,
    adapter: Option<&LoraAdapter<T>>,
    seq: &TokenSequence,
    rng: &mut Option<ChaCha8Rng>,
) -> SeqCache<T> {
    let cfg = &params.config;
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let len = seq.ids.len();
    let inv_sqrt_dh = T::of(1.0 / (dh as f64).sqrt());

    let mut x = Matrix::zeros(len, d);
    for (i, &id) in seq.ids.iter().enumerate() {
        let row = x.row_mut(i);
        row.copy_from_slice(params.tok_emb.row(id as usize));
        axpy(row, T::one(), params.pos_emb.row(i));
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, lp) in params.layers.iter().enumerate() {
        let lin = linears(lp, adapter, l);
        let (h1, ln1) = ln_forward(&x, &lp.ln1_g, &lp.ln1_b);
        let (q, tq) = lin.q.forward(&h1);
        let (k, tk) = lin.k.forward(&h1);
        let (v, tv) = lin.v.forward(&h1);
        let mut attn = Matrix::zeros(len, d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = (head_slice(&q, h, dh), head_slice(&k, h, dh), head_slice(&v, h, dh));
            let mut s = qh.matmul_nt(&kh);
            s.scale(inv_sqrt_dh);
            masked_softmax(&mut s, &seq.mask);
            add_head_slice(&mut attn, &s.matmul(&vh), h, dh);
            probs.push(s);
        }
        let (mut o, to) = lin.o.forward(&attn);
        let drop1 = dropout_mask(rng, o.len(), cfg.dropout_p);
        apply_mask(&mut o, &drop1);
        x.add_assign(&o);

        let (h2, ln2) = ln_forward(&x, &lp.ln2_g, &lp.ln2_b);
        let (u, t1) = lin.ff1.forward(&h2);
        let g = Matrix::from_vec(u.rows, u.cols, u.data.iter().map(|&z| gelu(z)).collect());
        let (mut f, t2) = lin.ff2.forward(&g);
        let drop2 = dropout_mask(rng, f.len(), cfg.dropout_p);
        apply_mask(&mut f, &drop2);
        x.add_assign(&f);

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            tq,
            tk,
            tv,
            probs,
            attn,
            to,
            drop1,
            ln2,
            h2,
            u,
            t1,
            g,
            t2,
            drop2,
        });
    }
    SeqCache {
        cls: x.row(0).to_vec(),
        layers,
    }
}

fn pair_mut<T>(g: &mut Option<LoraAdapter<T>>, layer: usize, t: LoraTarget) -> Option<&mut LoraPair<T>> {
    g.as_mut().and_then(|a| a.pairs.get_mut(&(layer, t)))
}

fn head_logits<T: Scalar>(params: &ModelParams<T>, cls: &[T]) -> Vec<T> {
    (0..params.config.n_classes)
        .map(|c| dot(params.head_w.row(c), cls) + params.head_b.data[c])
        .collect()
}

fn dropout_rng(train_mode: bool, p: f64, seed: u64) -> Option<ChaCha8Rng> {
    (train_mode && p > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed))
}

/// Logits (`batch x n_classes`) read from the `[CLS]` position.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    adapter: Option<&LoraAdapter<T>>,
    batch: &[TokenSequence],
    train_mode: bool,
    dropout_seed: u64,
) -> Result<Matrix<T>, ModelError> {
    validate(params, adapter, batch)?;
    let n_classes = params.config.n_classes;
    let mut rng = dropout_rng(train_mode, params.config.dropout_p, dropout_seed);
    let mut out = Matrix::zeros(batch.len(), n_classes);
    for (i, seq) in batch.iter().enumerate() {
        let cache = forward_seq(params, adapter, seq, &mut rng);
        out.row_mut(i).copy_from_slice(&head_logits(params, &cache.cls));
    }
    Ok(out)
}

/// Attention weights per layer and head for one sequence, eval mode.
pub fn attention_maps<T: Scalar>(
    params: &ModelParams<T>,
    adapter: Option<&LoraAdapter<T>>,
    seq: &TokenSequence,
) -> Result<Vec<Vec<Matrix<T>>>, ModelError> {
    validate(params, adapter, std::slice::from_ref(seq))?;
    let cache = forward_seq(params, adapter, seq, &mut None);
    Ok(cache.layers.into_iter().map(|l| l.probs).collect())
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().fold(T::zero(), |a, &z| a + (z - max).exp()).ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// Mean weighted cross-entropy plus `l2/2 * |w|^2` over trainable weights,
/// and its gradient. With an adapter only the adapter factors and the
/// classifier head are trainable; otherwise every tensor is.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    adapter: Option<&LoraAdapter<T>>,
    batch: &[TokenSequence],
    labels: &[usize],
    opts: &LossOptions,
) -> Result<(T, Gradients<T>), ModelError> {
    let cfg = &params.config;
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} sequences vs {} labels",
            batch.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.n_classes) {
        return Err(ModelError::LabelOutOfRange {
            label: bad,
            n_classes: cfg.n_classes,
        });
    }
    validate(params, adapter, batch)?;
    let weights: Vec<T> = match &opts.class_weights {
        Some(w) if w.len() == cfg.n_classes => w.iter().map(|&x| T::of(x)).collect(),
        Some(w) => {
            return Err(ModelError::ShapeMismatch(format!(
                "{} class weights for {} classes",
                w.len(),
                cfg.n_classes
            )))
        }
        None => vec![T::one(); cfg.n_classes],
    };

    let lora_mode = adapter.is_some();
    let mut base_g = (!lora_mode).then(|| ModelParams::<T>::zeros(cfg));
    let mut lora_g = adapter.map(|a| {
        let mut z = a.clone();
        for n in z.named_mut() {
            n.tensor.data.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    });
    let mut head_w_g = Matrix::zeros(cfg.n_classes, cfg.d_model);
    let mut head_b_g = Matrix::zeros(1, cfg.n_classes);

    let inv_b = T::of(1.0 / batch.len() as f64);
    let mut rng = dropout_rng(opts.train_mode, cfg.dropout_p, opts.dropout_seed);
    let mut loss = T::zero();
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let inv_sqrt_dh = T::of(1.0 / (dh as f64).sqrt());

    for (seq, &y) in batch.iter().zip(labels) {
        let cache = forward_seq(params, adapter, seq, &mut rng);
        let logits = head_logits(params, &cache.cls);
        let logp = log_softmax(&logits);
        loss = loss - weights[y] * logp[y] * inv_b;

        // dL/dlogits = w_y (softmax - onehot) / B
        let dlogits: Vec<T> = logp
            .iter()
            .enumerate()
            .map(|(c, &lp)| {
                let onehot = if c == y { T::one() } else { T::zero() };
                weights[y] * (lp.exp() - onehot) * inv_b
            })
            .collect();
        let mut dcls = vec![T::zero(); d];
        for (c, &dz) in dlogits.iter().enumerate() {
            axpy(head_w_g.row_mut(c), dz, &cache.cls);
            head_b_g.data[c] = head_b_g.data[c] + dz;
            axpy(&mut dcls, dz, params.head_w.row(c));
        }

        let len = seq.ids.len();
        let mut dx = Matrix::zeros(len, d);
        dx.row_mut(0).copy_from_slice(&dcls);

        for (l, lp) in params.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let lin = linears(lp, adapter, l);
            let mut lg = base_g.as_mut().map(|g| &mut g.layers[l]);

            // feed-forward sublayer
            let mut df = dx.clone();
            apply_mask(&mut df, &lc.drop2);
            let dg = lin.ff2.backward(
                &lc.g,
                lc.t2.as_ref(),
                &df,
                lg.as_mut().map(|g| (&mut g.w2, &mut g.b2)),
                pair_mut(&mut lora_g, l, LoraTarget::FfOut),
            );
            let du = Matrix::from_vec(
                dg.rows,
                dg.cols,
                dg.data.iter().zip(&lc.u.data).map(|(&a, &u)| a * gelu_grad(u)).collect(),
            );
            let dh2 = lin.ff1.backward(
                &lc.h2,
                lc.t1.as_ref(),
                &du,
                lg.as_mut().map(|g| (&mut g.w1, &mut g.b1)),
                pair_mut(&mut lora_g, l, LoraTarget::FfIn),
            );
            let dmid = ln_backward(
                &dh2,
                &lc.ln2,
                &lp.ln2_g,
                lg.as_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
            );
            dx.add_assign(&dmid);

            // attention sublayer
            let mut d_o = dx.clone();
            apply_mask(&mut d_o, &lc.drop1);
            let dattn = lin.o.backward(
                &lc.attn,
                lc.to.as_ref(),
                &d_o,
                lg.as_mut().map(|g| (&mut g.wo, &mut g.bo)),
                pair_mut(&mut lora_g, l, LoraTarget::Output),
            );
            let mut dq = Matrix::zeros(len, d);
            let mut dk = Matrix::zeros(len, d);
            let mut dv = Matrix::zeros(len, d);
            for h in 0..n_heads {
                let p = &lc.probs[h];
                let d_oh = head_slice(&dattn, h, dh);
                let (qh, kh, vh) = (head_slice(&lc.q, h, dh), head_slice(&lc.k, h, dh), head_slice(&lc.v, h, dh));
                let dp = d_oh.matmul_nt(&vh);
                add_head_slice(&mut dv, &p.matmul_tn(&d_oh), h, dh);
                let mut ds = Matrix::zeros(len, len);
                for r in 0..len {
                    let pr = p.row(r);
                    let dpr = dp.row(r);
                    let inner = dot(pr, dpr);
                    for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
                        *out = pr[c] * (dpr[c] - inner) * inv_sqrt_dh;
                    }
                }
                add_head_slice(&mut dq, &ds.matmul(&kh), h, dh);
                add_head_slice(&mut dk, &ds.matmul_tn(&qh), h, dh);
            }
            let mut dh1 = lin.q.backward(
                &lc.h1,
                lc.tq.as_ref(),
                &dq,
                lg.as_mut().map(|g| (&mut g.wq, &mut g.bq)),
                pair_mut(&mut lora_g, l, LoraTarget::Query),
            );
            dh1.add_assign(&lin.k.backward(
                &lc.h1,
                lc.tk.as_ref(),
                &dk,
                lg.as_mut().map(|g| (&mut g.wk, &mut g.bk)),
                pair_mut(&mut lora_g, l, LoraTarget::Key),
            ));
            dh1.add_assign(&lin.v.backward(
                &lc.h1,
                lc.tv.as_ref(),
                &dv,
                lg.as_mut().map(|g| (&mut g.wv, &mut g.bv)),
                pair_mut(&mut lora_g, l, LoraTarget::Value),
            ));
            let din = ln_backward(
                &dh1,
                &lc.ln1,
                &lp.ln1_g,
                lg.as_mut().map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
            );
            dx.add_assign(&din);
        }

        if let Some(g) = base_g.as_mut() {
            for (i, &id) in seq.ids.iter().enumerate() {
                axpy(g.tok_emb.row_mut(id as usize), T::one(), dx.row(i));
                axpy(g.pos_emb.row_mut(i), T::one(), dx.row(i));
            }
        }
    }

    let l2 = T::of(opts.l2_coeff);
    let half = T::of(0.5);
    let mut tensors = BTreeMap::new();
    match (base_g, lora_g) {
        (Some(mut g), None) => {
            g.head_w = head_w_g;
            g.head_b = head_b_g;
            for (gn, pn) in g.named_mut().into_iter().zip(params.named()) {
                if pn.decay && opts.l2_coeff != 0.0 {
                    loss = loss + half * l2 * pn.tensor.sum_squares();
                    axpy(&mut gn.tensor.data, l2, &pn.tensor.data);
                }
                tensors.insert(gn.name, gn.tensor.clone());
            }
        }
        (None, Some(mut g)) => {
            let a = adapter.expect("lora mode has an adapter");
            for (gn, pn) in g.named_mut().into_iter().zip(a.named()) {
                if opts.l2_coeff != 0.0 {
                    loss = loss + half * l2 * pn.tensor.sum_squares();
                    axpy(&mut gn.tensor.data, l2, &pn.tensor.data);
                }
                tensors.insert(gn.name, gn.tensor.clone());
            }
            if opts.l2_coeff != 0.0 {
                loss = loss + half * l2 * params.head_w.sum_squares();
                axpy(&mut head_w_g.data, l2, &params.head_w.data);
            }
            tensors.insert(HEAD_W.to_string(), head_w_g);
            tensors.insert(HEAD_B.to_string(), head_b_g);
        }
        _ => unreachable!("exactly one gradient buffer is allocated"),
    }
    Ok((loss, Gradients { tensors }))
}

/// Names of the tensors [`loss_and_grads`] differentiates in each mode.
pub fn trainable_names<T: Scalar>(params: &ModelParams<T>, adapter: Option<&LoraAdapter<T>>) -> Vec<String> {
    match adapter {
        None => params.named().into_iter().map(|n| n.name).collect(),
        Some(a) => a
            .named()
            .into_iter()
            .map(|n| n.name)
            .chain([HEAD_W.to_string(), HEAD_B.to_string()])
            .collect(),
    }
}

pub fn trainable_count<T: Scalar>(params: &ModelParams<T>, adapter: Option<&LoraAdapter<T>>) -> usize {
    match adapter {
        None => params.param_count(),
        Some(a) => a.param_count() + params.head_param_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_lora, init_model, merge_lora, ModelConfig};
    use crate::tokenizer::{CLS, PAD, SEP};

    fn small_cfg() -> ModelConfig {
        let mut c = ModelConfig::new(30, 7);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        c
    }

    fn seq(ids: &[u32], len: usize) -> TokenSequence {
        TokenSequence::from_unpadded(ids.to_vec(), len)
    }

    #[test]
    fn zero_b_adapter_is_bitwise_noop() {
        let p = init_model::<f32>(&ModelConfig::new(40, 9), 4).unwrap();
        let a = attach_lora(&p, 8, &LoraTarget::DEFAULT, 5).unwrap();
        let batch = vec![seq(&[CLS, 5, 6, 7, SEP], 9), seq(&[CLS, 30, SEP], 9)];
        let x = forward(&p, None, &batch, false, 0).unwrap();
        let y = forward(&p, Some(&a), &batch, false, 0).unwrap();
        assert_eq!(x.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   y.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn pad_only_tail_gives_finite_logits() {
        let p = init_model::<f32>(&small_cfg(), 1).unwrap();
        let out = forward(&p, None, &[seq(&[CLS], 7)], false, 0).unwrap();
        assert!(out.all_finite());
        let all_pad = TokenSequence { ids: vec![PAD; 7], mask: vec![0; 7], true_length: 0 };
        assert!(forward(&p, None, &[all_pad], false, 0).unwrap().all_finite());
    }

    #[test]
    fn batch_rows_are_independent_in_eval() {
        let p = init_model::<f32>(&small_cfg(), 2).unwrap();
        let target = seq(&[CLS, 4, 9, 11, SEP], 7);
        let single = forward(&p, None, std::slice::from_ref(&target), false, 0).unwrap();
        let mut batch: Vec<TokenSequence> = (0..7).map(|i| seq(&[CLS, 4 + i, SEP], 7)).collect();
        batch.insert(3, target);
        let many = forward(&p, None, &batch, false, 0).unwrap();
        assert_eq!(single.row(0), many.row(3));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut cfg = small_cfg();
        cfg.dropout_p = 0.5;
        let p = init_model::<f64>(&cfg, 3).unwrap();
        let b = vec![seq(&[CLS, 5, 6, SEP], 7)];
        let e1 = forward(&p, None, &b, false, 1).unwrap();
        let e2 = forward(&p, None, &b, false, 2).unwrap();
        assert_eq!(e1, e2);
        let t1 = forward(&p, None, &b, true, 1).unwrap();
        let t1b = forward(&p, None, &b, true, 1).unwrap();
        let t2 = forward(&p, None, &b, true, 2).unwrap();
        assert_eq!(t1, t1b);
        assert_ne!(t1, t2);
        assert_ne!(t1, e1);
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut p = init_model::<f64>(&small_cfg(), 0).unwrap();
        p.head_w.data.iter_mut().for_each(|x| *x = 0.0);
        let b = vec![seq(&[CLS, 5, SEP], 7), seq(&[CLS, 8, 9, SEP], 7)];
        let (loss, _) = loss_and_grads(&p, None, &b, &[0, 1], &LossOptions::default()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let p = init_model::<f32>(&small_cfg(), 0).unwrap();
        assert!(matches!(
            forward(&p, None, &[seq(&[CLS, 30, SEP], 7)], false, 0),
            Err(ModelError::IdOutOfRange { id: 30, vocab_size: 30 })
        ));
        assert!(matches!(
            forward(&p, None, &[seq(&[CLS, SEP], 6)], false, 0),
            Err(ModelError::ShapeMismatch(_))
        ));
        assert!(matches!(
            loss_and_grads(&p, None, &[seq(&[CLS, SEP], 7)], &[2], &LossOptions::default()),
            Err(ModelError::LabelOutOfRange { label: 2, n_classes: 2 })
        ));
    }

    #[test]
    fn lora_gradients_skip_base_weights() {
        let p = init_model::<f32>(&ModelConfig::new(20, 6), 0).unwrap();
        let a = attach_lora(&p, 8, &LoraTarget::DEFAULT, 1).unwrap();
        let b = vec![seq(&[CLS, 5, SEP], 6)];
        let (_, g) = loss_and_grads(&p, Some(&a), &b, &[1], &LossOptions::default()).unwrap();
        let names: Vec<&str> = g.tensors.keys().map(String::as_str).collect();
        assert!(!names.iter().any(|n| n.starts_with("layers.") || n.ends_with("emb")));
        assert!(names.contains(&"lora.layers.0.wq.a") && names.contains(&"head_w"));
        assert_eq!(g.param_count(), trainable_count(&p, Some(&a)));
        assert_eq!(names.len(), trainable_names(&p, Some(&a)).len());
    }

    #[test]
    fn attention_respects_mask() {
        let p = init_model::<f64>(&small_cfg(), 9).unwrap();
        let s = seq(&[CLS, 4, 5, SEP], 7);
        for layer in attention_maps(&p, None, &s).unwrap() {
            for probs in layer {
                for r in 0..probs.rows {
                    let row = probs.row(r);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[4..].iter().all(|&w| w < 1e-9));
                }
            }
        }
    }

    #[test]
    fn merged_matches_adapter_forward() {
        let p = init_model::<f64>(&small_cfg(), 7).unwrap();
        let mut a = attach_lora(&p, 2, &[LoraTarget::Query, LoraTarget::Value, LoraTarget::FfIn], 8).unwrap();
        for pair in a.pairs.values_mut() {
            pair.b.data.iter_mut().enumerate().for_each(|(i, x)| *x = ((i % 7) as f64 - 3.0) * 0.1);
        }
        let m = merge_lora(&p, &a).unwrap();
        let b = vec![seq(&[CLS, 3, 4, 5, SEP], 7), seq(&[CLS, 29, SEP], 7)];
        let x = forward(&p, Some(&a), &b, false, 0).unwrap();
        let y = forward(&m, None, &b, false, 0).unwrap();
        for (u, v) in x.data.iter().zip(&y.data) {
            assert!((u - v).abs() <= 1e-9 * u.abs().max(v.abs()).max(1e-12), "{u} vs {v}");
        }
    }
}
