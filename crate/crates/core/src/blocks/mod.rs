//! Extract-or-Correlation building blocks.
//!
//! Inside the network every feature map is carried as a [`Tokens`] value: a
//! `[h·w, c]` token matrix on the graph plus its spatial grid. The public
//! [`FeatureMap`] is the channel-first `[c,h,w]` value form.

mod attention;
mod embed;
mod eoc;
mod head;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

pub use attention::{attend, attention, eoc_attention, qkv_project, reduce_kv, AttnWeights, Projection};
pub use embed::{patch_embed, PatchEmbedWeights};
pub use eoc::{eoc_block, mlp_cond_pe, sa_block, BlockWeights, MlpWeights};
pub use head::{mix_mlp_block, prediction_head, HeadWeights, MixMlpWeights, SpatialMix, SpatialMixKind};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Self-attention within each branch, or cross-attention between branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    SelfAttn,
    CrossAttn,
}

/// Head count `n`, key/value spatial reduction `r` and channel width `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub heads: usize,
    pub reduction: usize,
    pub dim: usize,
}

impl AttnConfig {
    pub fn new(heads: usize, reduction: usize, dim: usize) -> Result<Self> {
        let cfg = Self { heads, reduction, dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(dim_err!("dim {} not divisible into {} heads", self.dim, self.heads));
        }
        if self.reduction == 0 {
            return Err(dim_err!("reduction ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// A `[h·w, c]` token matrix on a graph, with its spatial grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels<F: Float>(&self, g: &Graph<F>) -> usize {
        g.shape(self.var)[1]
    }

    /// Tokens viewed as a channel-first `[c,h,w]` map.
    pub fn to_chw<F: Float>(self, g: &mut Graph<F>) -> Result<Var> {
        let c = self.channels(g);
        let t = g.transpose(self.var)?;
        g.reshape(t, &[c, self.h, self.w])
    }

    pub fn from_chw<F: Float>(g: &mut Graph<F>, chw: Var) -> Result<Self> {
        let s = g.shape(chw).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("expected [c,h,w], got {s:?}"));
        }
        let flat = g.reshape(chw, &[s[0], s[1] * s[2]])?;
        let var = g.transpose(flat)?;
        Ok(Self { var, h: s[1], w: s[2] })
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }

    pub fn to_feature_map<F: Float>(self, g: &mut Graph<F>) -> Result<FeatureMap<F>> {
        let v = self.to_chw(g)?;
        FeatureMap::new(g.value(v).clone())
    }
}

/// Channel-first `[c,h,w]` features of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    tensor: Tensor<F>,
}

impl<F: Float> FeatureMap<F> {
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(dim_err!("feature map must be [c,h,w], got {:?}", tensor.shape()));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }

    pub fn token_count(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Places the map on `g` as a token matrix.
    pub fn to_tokens(&self, g: &mut Graph<F>, trainable: bool) -> Result<Tokens> {
        let v = if trainable { g.variable(self.tensor.clone()) } else { g.constant(self.tensor.clone()) };
        Tokens::from_chw(g, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearWeights {
    /// `[in, out]`
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearWeights {
    pub fn apply<F: Float>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormWeights {
    pub fn apply<F: Float>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Registers freshly initialized parameters: truncated normal (σ = 0.02,
/// cut at ±2σ) for weights, zeros for biases, ones for norm scales.
pub struct Init<'a, F, R> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
}

impl<'a, F: Float, R: Rng> Init<'a, F, R> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    pub fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = Tensor::trunc_normal(shape, INIT_STD, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearWeights {
        LinearWeights {
            w: self.weight(format!("{prefix}.w"), &[fan_in, fan_out]),
            b: Some(self.zeros(format!("{prefix}.b"), &[fan_out])),
        }
    }

    /// Linear layer with weights `N(0, gain/fan_in)` (truncated at 2σ).
    pub fn scaled_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> LinearWeights {
        let std = (gain / fan_in as f64).sqrt();
        let w = Tensor::trunc_normal(&[fan_in, fan_out], std, self.rng);
        LinearWeights { w: self.store.add(format!("{prefix}.w"), w), b: Some(self.zeros(format!("{prefix}.b"), &[fan_out])) }
    }

    /// Square linear layer initialized at identity plus the usual noise.
    pub fn identity_linear(&mut self, prefix: &str, n: usize) -> LinearWeights {
        let mut w = Tensor::trunc_normal(&[n, n], INIT_STD, self.rng);
        for i in 0..n {
            w.set(&[i, i], w.at(&[i, i]) + F::one());
        }
        LinearWeights { w: self.store.add(format!("{prefix}.w"), w), b: Some(self.zeros(format!("{prefix}.b"), &[n])) }
    }

    /// `[h,w]` kernel with a unit tap at the origin plus the usual noise.
    pub fn delta_kernel(&mut self, name: String, h: usize, w: usize) -> ParamId {
        let mut k = Tensor::trunc_normal(&[h, w], INIT_STD, self.rng);
        k.set(&[0, 0], k.at(&[0, 0]) + F::one());
        self.store.add(name, k)
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) -> LayerNormWeights {
        LayerNormWeights {
            gamma: self.ones(format!("{prefix}.gamma"), &[c]),
            beta: self.zeros(format!("{prefix}.beta"), &[c]),
        }
    }
}
