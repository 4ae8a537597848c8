use rand::Rng;

use super::{AttnConfig, Init, LayerNormWeights, LinearWeights, Mode, Tokens};
use crate::error::{dim_err, Result};
use crate::tensor::{Float, Graph, PadMode, ParamId, ParamStore, Var};

/// Which of the three token projections to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

/// Spatial reduction of keys/values: `r×r` conv with stride `r`, then LN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub conv: ParamId,
    pub bias: ParamId,
    pub norm: LayerNormWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnWeights {
    pub q: LinearWeights,
    pub k: LinearWeights,
    pub v: LinearWeights,
    pub out: LinearWeights,
    /// Present iff the reduction ratio exceeds one.
    pub reduction: Option<Reduction>,
}

impl AttnWeights {
    pub fn init<F: Float, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, cfg: &AttnConfig) -> Self {
        let c = cfg.dim;
        let r = cfg.reduction;
        let reduction = (r > 1).then(|| Reduction {
            conv: init.weight(format!("{prefix}.sr.conv.w"), &[c, c, r, r]),
            bias: init.zeros(format!("{prefix}.sr.conv.b"), &[c]),
            norm: init.layer_norm(&format!("{prefix}.sr.norm"), c),
        });
        Self {
            q: init.linear(&format!("{prefix}.q"), c, c),
            k: init.linear(&format!("{prefix}.k"), c, c),
            v: init.linear(&format!("{prefix}.v"), c, c),
            out: init.linear(&format!("{prefix}.proj"), c, c),
            reduction,
        }
    }
}

/// Reduced key/value source tokens (`h·w/r²` of them); identity when `r = 1`.
pub fn reduce_kv<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &AttnWeights,
    cfg: &AttnConfig,
    f: Tokens,
) -> Result<Tokens> {
    let r = cfg.reduction;
    if r == 1 {
        return Ok(f);
    }
    if !f.h.is_multiple_of(r) || !f.w.is_multiple_of(r) {
        return Err(dim_err!("reduction {r} does not divide grid {}x{}", f.h, f.w));
    }
    let red = w.reduction.ok_or_else(|| dim_err!("reduction {r} configured without reduction weights"))?;
    let chw = f.to_chw(g)?;
    let conv = g.param(p, red.conv);
    let bias = g.param(p, red.bias);
    let y = g.conv2d(chw, conv, Some(bias), r, PadMode::Valid)?;
    let t = Tokens::from_chw(g, y)?;
    let normed = red.norm.apply(g, p, t.var)?;
    Ok(t.with_var(normed))
}

/// `[t, c]` tokens to `[n, t, d_h]` heads.
fn split_heads<F: Float>(g: &mut Graph<F>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let d = s[1] / heads;
    let r = g.reshape(x, &[s[0], heads, d])?;
    g.permute(r, &[1, 0, 2])
}

fn merge_heads<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[1, 0, 2])?;
    g.reshape(p, &[s[1], s[0] * s[2]])
}

fn project<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    lin: &LinearWeights,
    cfg: &AttnConfig,
    src: Tokens,
) -> Result<Var> {
    if src.channels(g) != cfg.dim {
        return Err(dim_err!("tokens have {} channels, attention expects {}", src.channels(g), cfg.dim));
    }
    let y = lin.apply(g, p, src.var)?;
    split_heads(g, y, cfg.heads)
}

/// Per-head query/key/value tokens `[n, t, d_h]`; keys and values are taken
/// from the spatially reduced grid, queries keep full resolution.
pub fn qkv_project<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &AttnWeights,
    cfg: &AttnConfig,
    f: Tokens,
    which: Projection,
) -> Result<Var> {
    match which {
        Projection::Query => project(g, p, &w.q, cfg, f),
        Projection::Key => {
            let reduced = reduce_kv(g, p, w, cfg, f)?;
            project(g, p, &w.k, cfg, reduced)
        }
        Projection::Value => {
            let reduced = reduce_kv(g, p, w, cfg, f)?;
            project(g, p, &w.v, cfg, reduced)
        }
    }
}

/// Scaled dot-product attention, batched over a leading head axis:
/// `softmax(q kᵀ / √d_h) v` with `q:[n,t_q,d_h]`, `k,v:[n,t_kv,d_h]`.
pub fn attention<F: Float>(g: &mut Graph<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let d = *sq.last().ok_or_else(|| dim_err!("attention on scalar"))?;
    if sk.last() != Some(&d) || sv.last() != Some(&d) {
        return Err(dim_err!("attention head dims differ: q {sq:?} k {sk:?} v {sv:?}"));
    }
    if sk != sv {
        return Err(dim_err!("key {sk:?} and value {sv:?} token counts differ"));
    }
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores)?;
    g.matmul(attn, v)
}

/// Attention update for queries from `q_src` over keys/values from `kv_src`,
/// after the output projection (no residual).
pub fn attend<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &AttnWeights,
    cfg: &AttnConfig,
    q_src: Tokens,
    kv_src: Tokens,
) -> Result<Var> {
    let q = project(g, p, &w.q, cfg, q_src)?;
    let reduced = reduce_kv(g, p, w, cfg, kv_src)?;
    let k = project(g, p, &w.k, cfg, reduced)?;
    let v = project(g, p, &w.v, cfg, reduced)?;
    let heads = attention(g, q, k, v)?;
    let merged = merge_heads(g, heads)?;
    w.out.apply(g, p, merged)
}

/// One attention sub-layer applied to both branches with shared weights.
///
/// `SelfAttn`: `f_z += A(f_z, f_z)`, `f_x += A(f_x, f_x)`.
/// `CrossAttn`: `f_z += A(f_z, f_x)`, `f_x += A(f_x, f_z)`.
pub fn eoc_attention<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &AttnWeights,
    cfg: &AttnConfig,
    mode: Mode,
    fz: Tokens,
    fx: Tokens,
) -> Result<(Tokens, Tokens)> {
    let (dz, dx) = branch_updates(g, p, w, cfg, mode, fz, fx)?;
    let z = g.add(fz.var, dz)?;
    let x = g.add(fx.var, dx)?;
    Ok((fz.with_var(z), fx.with_var(x)))
}

pub(super) fn branch_updates<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &AttnWeights,
    cfg: &AttnConfig,
    mode: Mode,
    fz: Tokens,
    fx: Tokens,
) -> Result<(Var, Var)> {
    let (cz, cx) = (fz.channels(g), fx.channels(g));
    if cz != cx {
        return Err(dim_err!("branch channel mismatch: template {cz}, search {cx}"));
    }
    Ok(match mode {
        Mode::SelfAttn => (attend(g, p, w, cfg, fz, fz)?, attend(g, p, w, cfg, fx, fx)?),
        Mode::CrossAttn => (attend(g, p, w, cfg, fz, fx)?, attend(g, p, w, cfg, fx, fz)?),
    })
}
