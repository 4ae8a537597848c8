use rand::Rng;

use super::{Init, LayerNormWeights, Tokens};
use crate::error::{dim_err, Result};
use crate::tensor::{Float, Graph, PadKind, PadMode, ParamId, ParamStore, Var};

/// Strided `k×k` convolution followed by a per-position layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedWeights {
    /// `[c_out, c_in, k, k]`
    pub conv: ParamId,
    pub bias: ParamId,
    pub norm: LayerNormWeights,
    pub kernel: usize,
    pub stride: usize,
}

impl PatchEmbedWeights {
    pub fn init<F: Float, R: Rng>(
        init: &mut Init<'_, F, R>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: init.weight(format!("{prefix}.conv.w"), &[c_out, c_in, kernel, kernel]),
            bias: init.zeros(format!("{prefix}.conv.b"), &[c_out]),
            norm: init.layer_norm(&format!("{prefix}.norm"), c_out),
            kernel,
            stride,
        }
    }
}

/// Embeds a `[c_in,H,W]` image or map into `[H/s · W/s, c_out]` tokens.
pub fn patch_embed<F: Float>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &PatchEmbedWeights,
    input: Var,
    pad: PadKind,
) -> Result<Tokens> {
    let s = g.shape(input).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("patch_embed input must be [c,h,w], got {s:?}"));
    }
    if w.kernel.is_multiple_of(2) {
        return Err(dim_err!("patch_embed kernel {} must be odd", w.kernel));
    }
    if !s[1].is_multiple_of(w.stride) || !s[2].is_multiple_of(w.stride) {
        return Err(dim_err!("input {}x{} not divisible by stride {}", s[1], s[2], w.stride));
    }
    let conv = g.param(p, w.conv);
    let bias = g.param(p, w.bias);
    let mode = PadMode::new(pad, (w.kernel - 1) / 2);
    let y = g.conv2d(input, conv, Some(bias), w.stride, mode)?;
    let tokens = Tokens::from_chw(g, y)?;
    let normed = w.norm.apply(g, p, tokens.var)?;
    Ok(tokens.with_var(normed))
}
