use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Init, LinearWeights, Tokens};
use crate::error::{dim_err, Result};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Var};

/// Parameterization of the position-mixing layer of a Mix-MLP block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialMixKind {
    /// Unconstrained `[h·w, h·w]` linear layer.
    #[default]
    Dense,
    /// Circular convolution with a full-grid `[h,w]` kernel and a scalar
    /// bias; commutes with circular shifts of the grid.
    Circulant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMix {
    Dense { lin: LinearWeights, h: usize, w: usize },
    Circulant { kernel: ParamId, bias: ParamId, h: usize, w: usize },
}

impl SpatialMix {
    pub fn grid(&self) -> (usize, usize) {
        match *self {
            SpatialMix::Dense { h, w, .. } | SpatialMix::Circulant { h, w, .. } => (h, w),
        }
    }

    /// `x:[c, h·w] -> [c, h·w]`, before the activation.
    fn apply<F: Float>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        match *self {
            SpatialMix::Dense { lin, .. } => lin.apply(g, p, x),
            SpatialMix::Circulant { kernel, bias, h, w } => {
                let t = h * w;
                let k = g.param(p, kernel);
                let mut idx = Vec::with_capacity(t * t);
                for qy in 0..h {
                    for qx in 0..w {
                        for py in 0..h {
                            for px in 0..w {
                                let dy = (py + h - qy) % h;
                                let dx = (px + w - qx) % w;
                                idx.push(dy * w + dx);
                            }
                        }
                    }
                }
                let m = g.gather(k, idx, &[t, t])?;
                let b = g.param(p, bias);
                let b = g.gather(b, vec![0; t], &[t])?;
                g.linear(x, m, Some(b))
            }
        }
    }
}

/// Channel mixing (`φ_cn`, shared over positions) then position mixing
/// (`φ_sp`, shared over channels), each a linear layer with ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixMlpWeights {
    pub channel: LinearWeights,
    pub spatial: SpatialMix,
}

impl MixMlpWeights {
    pub fn init<F: Float, R: Rng>(
        init: &mut Init<'_, F, R>,
        prefix: &str,
        c: usize,
        grid: (usize, usize),
        kind: SpatialMixKind,
    ) -> Self {
        let (h, w) = grid;
        let spatial = match kind {
            SpatialMixKind::Dense => SpatialMix::Dense { lin: init.identity_linear(&format!("{prefix}.sp"), h * w), h, w },
            SpatialMixKind::Circulant => SpatialMix::Circulant {
                kernel: init.delta_kernel(format!("{prefix}.sp.kernel"), h, w),
                bias: init.zeros(format!("{prefix}.sp.b"), &[1]),
                h,
                w,
            },
        };
        Self { channel: init.scaled_linear(&format!("{prefix}.cn"), c, c, 2.0), spatial }
    }
}

pub fn mix_mlp_block<F: Float>(g: &mut Graph<F>, p: &ParamStore<F>, w: &MixMlpWeights, f: Tokens) -> Result<Tokens> {
    let (h, wd) = w.spatial.grid();
    if (f.h, f.w) != (h, wd) {
        return Err(dim_err!("mix-mlp spatial weights built for {h}x{wd}, got grid {}x{}", f.h, f.w));
    }
    let cn = w.channel.apply(g, p, f.var)?;
    let cn = g.relu(cn);
    let by_channel = g.transpose(cn)?;
    let sp = w.spatial.apply(g, p, by_channel)?;
    let sp = g.relu(sp);
    let back = g.transpose(sp)?;
    Ok(f.with_var(back))
}

/// Stacked Mix-MLP blocks, a per-position linear to `k` outputs, sigmoid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadWeights {
    pub blocks: Vec<MixMlpWeights>,
    pub out: LinearWeights,
}

impl HeadWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Float, R: Rng>(
        init: &mut Init<'_, F, R>,
        prefix: &str,
        c: usize,
        grid: (usize, usize),
        depth: usize,
        outputs: usize,
        kind: SpatialMixKind,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| MixMlpWeights::init(init, &format!("{prefix}.mmb{}", i + 1), c, grid, kind))
            .collect();
        Self { blocks, out: init.scaled_linear(&format!("{prefix}.out"), c, outputs, 1.0) }
    }
}

/// Head output as a `[k, h, w]` map in `(0,1)`.
pub fn prediction_head<F: Float>(g: &mut Graph<F>, p: &ParamStore<F>, w: &HeadWeights, f: Tokens) -> Result<Var> {
    let mut t = f;
    for block in &w.blocks {
        t = mix_mlp_block(g, p, block, t)?;
    }
    let logits = w.out.apply(g, p, t.var)?;
    let probs = g.sigmoid(logits);
    t.with_var(probs).to_chw(g)
}
