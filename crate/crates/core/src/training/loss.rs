use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::harness::{cell_center, reg_unit, Box, CropMeta};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Probability clamp for the binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { giou: 5.0, l1: 7.0, cls: 12.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.giou, self.l1, self.cls].iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(config_err!("loss weights must be positive: {self:?}"))
        }
    }

    /// `λ_cls·cls + λ_G·giou + λ_1·l1`.
    pub fn total(&self, cls: f64, giou: f64, l1: f64) -> f64 {
        self.cls * cls + self.giou * giou + self.l1 * l1
    }
}

/// Per-cell training targets for one search crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<F> {
    /// `[1,h,w]` with 1 at positive cells.
    pub labels: Tensor<F>,
    /// `[4,h,w]` normalized ltrb distances (zero at negative cells).
    pub reg: Tensor<F>,
    /// Flat indices of the positive cells, row-major.
    pub positives: Vec<usize>,
}

impl<F> Targets<F> {
    /// No cell center falls inside the box; the regression term is skipped.
    pub fn skip(&self) -> bool {
        self.positives.is_empty()
    }
}

/// A cell is positive iff its center lies strictly inside `gt` (crop
/// coordinates); regression targets are its ltrb distances to the box edges
/// in units of [`reg_unit`], clamped to `[0,1]`.
pub fn assign_targets<F: Float>(gt: &Box, grid: (usize, usize), meta: &CropMeta) -> Result<Targets<F>> {
    gt.validate()?;
    let (h, w) = grid;
    if h != w || h == 0 {
        return Err(dim_err!("score grid must be square and non-empty, got {h}x{w}"));
    }
    let size = meta.out_size;
    let u = reg_unit(size);
    let mut labels = Tensor::zeros(&[1, h, w]);
    let mut reg = Tensor::zeros(&[4, h, w]);
    let mut positives = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = cell_center(i, j, h, size);
            if cx > gt.x1 && cx < gt.x2 && cy > gt.y1 && cy < gt.y2 {
                labels.set(&[0, i, j], F::one());
                let d = [cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy];
                for (k, v) in d.iter().enumerate() {
                    reg.set(&[k, i, j], F::of((v / u).clamp(0.0, 1.0)));
                }
                positives.push(i * w + j);
            }
        }
    }
    Ok(Targets { labels, reg, positives })
}

/// Mean binary cross-entropy of probabilities `p` against labels `y`.
pub fn cls_loss<F: Float>(g: &mut Graph<F>, p: Var, y: Var) -> Result<Var> {
    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(pc);
    let q = g.scale(pc, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q);
    let ny = g.scale(y, -1.0);
    let ny = g.add_scalar(ny, 1.0);
    let a = g.mul(y, log_p)?;
    let b = g.mul(ny, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Scalar reference for [`cls_loss`].
pub fn bce(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len() as f64;
    -p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

/// Regression loss parts averaged over positive cells.
#[derive(Clone, Copy, Debug)]
pub struct RegTerms {
    /// Mean `1 − GIoU`.
    pub giou: Var,
    /// Mean absolute ltrb error.
    pub l1: Var,
}

/// GIoU and L1 terms between predicted `reg:[4,h,w]` and `target:[4,h,w]`
/// at the cells in `positives`. Both boxes at a cell share its center, so
/// areas follow from the ltrb distances directly. With no positives both
/// terms are the constant 0.
pub fn reg_terms<F: Float>(g: &mut Graph<F>, reg: Var, target: Var, positives: &[usize]) -> Result<RegTerms> {
    let shape = g.shape(reg).to_vec();
    if shape.len() != 3 || shape[0] != 4 || g.shape(target) != shape.as_slice() {
        return Err(dim_err!("reg {:?} and target {:?} must both be [4,h,w]", shape, g.shape(target)));
    }
    if positives.is_empty() {
        let zero = g.constant(Tensor::scalar(F::zero()));
        return Ok(RegTerms { giou: zero, l1: zero });
    }
    let hw = shape[1] * shape[2];
    let n = positives.len();
    let idx: Vec<usize> = (0..4).flat_map(|k| positives.iter().map(move |&p| k * hw + p)).collect();
    let p = g.gather(reg, idx.clone(), &[4, n])?;
    let t = g.gather(target, idx, &[4, n])?;

    let diff = g.sub(p, t)?;
    let diff = g.abs(diff);
    let l1 = g.mean(diff);

    let row = |g: &mut Graph<F>, v: Var, k: usize| g.slice_rows(v, k, 1);
    let (pl, pt, pr, pb) = (row(g, p, 0)?, row(g, p, 1)?, row(g, p, 2)?, row(g, p, 3)?);
    let (tl, tt, tr, tb) = (row(g, t, 0)?, row(g, t, 1)?, row(g, t, 2)?, row(g, t, 3)?);
    let span = |g: &mut Graph<F>, a: Var, b: Var| g.add(a, b);
    let pw = span(g, pl, pr)?;
    let ph = span(g, pt, pb)?;
    let tw = span(g, tl, tr)?;
    let th = span(g, tt, tb)?;
    let area_p = g.mul(pw, ph)?;
    let area_t = g.mul(tw, th)?;

    let il = g.minimum(pl, tl)?;
    let ir = g.minimum(pr, tr)?;
    let it = g.minimum(pt, tt)?;
    let ib = g.minimum(pb, tb)?;
    let iw = g.add(il, ir)?;
    let ih = g.add(it, ib)?;
    let inter = g.mul(iw, ih)?;

    let cl = g.maximum(pl, tl)?;
    let cr = g.maximum(pr, tr)?;
    let ct = g.maximum(pt, tt)?;
    let cb = g.maximum(pb, tb)?;
    let cw = g.add(cl, cr)?;
    let ch = g.add(ct, cb)?;
    let enclosing = g.mul(cw, ch)?;

    let sum_areas = g.add(area_p, area_t)?;
    let union = g.sub(sum_areas, inter)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(enclosing, union)?;
    let penalty = g.div(gap, enclosing)?;
    let giou = g.sub(iou, penalty)?;
    let one_minus = g.scale(giou, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let giou = g.mean(one_minus);
    Ok(RegTerms { giou, l1 })
}

/// `λ_G·L_GIoU + λ_1·L_1` over positive cells.
pub fn reg_loss<F: Float>(g: &mut Graph<F>, reg: Var, target: Var, positives: &[usize], w: &LossWeights) -> Result<Var> {
    let t = reg_terms(g, reg, target, positives)?;
    let a = g.scale(t.giou, w.giou);
    let b = g.scale(t.l1, w.l1);
    g.add(a, b)
}

/// Weighted sum of already reduced loss parts.
pub fn total_loss<F: Float>(g: &mut Graph<F>, cls: Var, reg: RegTerms, w: &LossWeights) -> Result<Var> {
    let c = g.scale(cls, w.cls);
    let a = g.scale(reg.giou, w.giou);
    let b = g.scale(reg.l1, w.l1);
    let s = g.add(c, a)?;
    g.add(s, b)
}

/// Loss components of one sample: `(total, cls, giou, l1)` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Full tracking loss for predicted maps against assigned targets.
pub fn tracking_loss<F: Float>(g: &mut Graph<F>, cls: Var, reg: Var, targets: &Targets<F>, w: &LossWeights) -> Result<SampleLoss> {
    let y = g.constant(targets.labels.clone());
    let t = g.constant(targets.reg.clone());
    let c = cls_loss(g, cls, y)?;
    let r = reg_terms(g, reg, t, &targets.positives)?;
    let total = total_loss(g, c, r, w)?;
    Ok(SampleLoss { total, cls: c, giou: r.giou, l1: r.l1 })
}

/// Mean softmax cross-entropy of `logits:[classes]` against `label`.
pub fn cross_entropy<F: Float>(g: &mut Graph<F>, logits: Var, label: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if label >= n {
        return Err(dim_err!("label {label} out of range for {n} classes"));
    }
    let row = g.reshape(logits, &[1, n])?;
    let p = g.softmax(row)?;
    let p = g.gather(p, vec![label], &[1])?;
    let p = g.clamp(p, PROB_EPS, 1.0);
    let lp = g.log(p);
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0))
}
