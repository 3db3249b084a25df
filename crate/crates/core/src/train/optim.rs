//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::model::{Gradients, LoraAdapter, Matrix, ModelParams, Named};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every tensor in `params` that has a gradient; others are left alone.
    pub fn step(&mut self, params: Vec<Named<&mut Matrix<f32>>>, grads: &Gradients<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            let (m, v) = self
                .moments
                .entry(p.name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.tensor.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// The tensors training may touch: everything in full fine-tuning, the
/// adapter factors plus the classifier head otherwise.
pub fn trainable_mut<'a>(
    params: &'a mut ModelParams<f32>,
    adapter: Option<&'a mut LoraAdapter<f32>>,
) -> Vec<Named<&'a mut Matrix<f32>>> {
    match adapter {
        None => params.named_mut(),
        Some(a) => {
            let mut out = a.named_mut();
            out.extend(
                params
                    .named_mut()
                    .into_iter()
                    .filter(|n| n.name == crate::model::HEAD_W || n.name == crate::model::HEAD_B),
            );
            out
        }
    }
}
