use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Float, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW with bias correction and decoupled weight decay. Decay applies to
/// tensors of rank ≥ 2 only (weights, not biases or norm scales).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<F: Float>(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { config, t: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter with a gradient; `lr[i]` is the rate
    /// for the `i`-th store entry.
    pub fn step<F: Float>(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: &[f64]) -> Result<()> {
        if grads.len() != store.len() || lr.len() != store.len() || self.m.len() != store.len() {
            return Err(dim_err!(
                "optimizer sized for {} tensors, got {} grads / {} rates for {}",
                self.m.len(),
                grads.len(),
                lr.len(),
                store.len()
            ));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id);
            let decay = if w.shape().len() >= 2 { 1.0 - lr[k] * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            match &grads[k] {
                Some(g) => {
                    if g.shape() != w.shape() {
                        return Err(dim_err!("gradient {:?} for parameter {:?}", g.shape(), w.shape()));
                    }
                    for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = gi.as_f64();
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let upd = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *wi = F::of(wi.as_f64() * decay - lr[k] * upd);
                    }
                }
                None if decay != 1.0 => {
                    for wi in w.data_mut() {
                        *wi = F::of(wi.as_f64() * decay);
                    }
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
