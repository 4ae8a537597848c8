use rand::Rng;

use super::attention::branch_updates;
use super::{AttnConfig, AttnWeights, Init, LayerNormWeights, LinearWeights, Mode, Tokens};
use crate::error::Result;
use crate::tensor::{Float, Graph, PadKind, PadMode, ParamId, ParamStore};

pub const MLP_RATIO: usize = 4;

/// `c → 4c`, 3×3 depthwise positional conv, GELU, `4c → c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpWeights {
    pub fc1: LinearWeights,
    /// `[4c, 1, 3, 3]`
    pub pe: ParamId,
    pub pe_bias: ParamId,
    pub fc2: LinearWeights,
}

impl MlpWeights {
    pub fn init<F: Float, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, c: usize) -> Self {
        let hidden = MLP_RATIO * c;
        Self {
            fc1: init.linear(&format!("{prefix}.fc1"), c, hidden),
            pe: init.weight(format!("{prefix}.pe.w"), &[hidden, 1, 3, 3]),
            pe_bias: init.zeros(format!("{prefix}.pe.b"), &[hidden]),
            fc2: init.linear(&format!("{prefix}.fc2"), hidden, c),
        }
    }
}

/// MLP with conditional positional encoding; returns the update (no residual).
pub fn mlp_cond_pe<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &MlpWeights,
    f: Tokens,
    pad: PadKind,
) -> Result<Tokens> {
    let hidden = w.fc1.apply(g, p, f.var)?;
    let chw = f.with_var(hidden).to_chw(g)?;
    let pe = g.param(p, w.pe);
    let conv = g.depthwise_conv2d(chw, pe, PadMode::new(pad, 1))?;
    let back = super::Tokens::from_chw(g, conv)?;
    let pe_bias = g.param(p, w.pe_bias);
    let biased = g.add_bias(back.var, pe_bias)?;
    let act = g.gelu(biased);
    let out = w.fc2.apply(g, p, act)?;
    Ok(f.with_var(out))
}

/// Pre-norm EoC block weights, shared by both branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWeights {
    pub norm1: LayerNormWeights,
    pub attn: AttnWeights,
    pub norm2: LayerNormWeights,
    pub mlp: MlpWeights,
}

impl BlockWeights {
    pub fn init<F: Float, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, cfg: &AttnConfig) -> Self {
        Self {
            norm1: init.layer_norm(&format!("{prefix}.norm1"), cfg.dim),
            attn: AttnWeights::init(init, &format!("{prefix}.attn"), cfg),
            norm2: init.layer_norm(&format!("{prefix}.norm2"), cfg.dim),
            mlp: MlpWeights::init(init, &format!("{prefix}.mlp"), cfg.dim),
        }
    }
}

/// `f += Attn(LN(f))`, then `f += MLP(LN(f))` on each branch. In cross mode
/// the attention sub-layer reads keys/values from the other branch.
#[allow(clippy::too_many_arguments)]
pub fn eoc_block<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &BlockWeights,
    cfg: &AttnConfig,
    mode: Mode,
    pad: PadKind,
    fz: Tokens,
    fx: Tokens,
) -> Result<(Tokens, Tokens)> {
    let nz = fz.with_var(w.norm1.apply(g, p, fz.var)?);
    let nx = fx.with_var(w.norm1.apply(g, p, fx.var)?);
    let (dz, dx) = branch_updates(g, p, &w.attn, cfg, mode, nz, nx)?;
    let z = fz.with_var(g.add(fz.var, dz)?);
    let x = fx.with_var(g.add(fx.var, dx)?);
    Ok((mlp_residual(g, p, w, pad, z)?, mlp_residual(g, p, w, pad, x)?))
}

fn mlp_residual<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &BlockWeights,
    pad: PadKind,
    f: Tokens,
) -> Result<Tokens> {
    let n = f.with_var(w.norm2.apply(g, p, f.var)?);
    let d = mlp_cond_pe(g, p, &w.mlp, n, pad)?;
    Ok(f.with_var(g.add(f.var, d.var)?))
}

/// Self-attention block on a single branch; equals either branch of
/// [`eoc_block`] in `SelfAttn` mode.
pub fn sa_block<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &BlockWeights,
    cfg: &AttnConfig,
    pad: PadKind,
    f: Tokens,
) -> Result<Tokens> {
    let n = f.with_var(w.norm1.apply(g, p, f.var)?);
    let d = super::attend(g, p, &w.attn, cfg, n, n)?;
    let f = f.with_var(g.add(f.var, d)?);
    mlp_residual(g, p, w, pad, f)
}
