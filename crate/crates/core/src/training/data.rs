use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::harness::{crop_at, crop_region, normalize_input, Box, CropMeta, Sequence, SEARCH_FACTOR, TEMPLATE_FACTOR};
use crate::model::ModelConfig;
use crate::tensor::{Float, Tensor};

/// One training triple: normalized template and search crops and the target
/// box in search-crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample<F = f32> {
    pub template: Tensor<F>,
    pub search: Tensor<F>,
    pub gt: Box,
    pub meta: CropMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub flip_prob: f64,
    /// Multiplicative brightness range `1 ± brightness`, per crop.
    pub brightness: f64,
    /// Maximum search-center offset per axis, in units of `√(w·h)`.
    pub center_jitter: f64,
    /// Search side is scaled by `exp(u)`, `u ~ U(−scale_jitter, scale_jitter)`.
    pub scale_jitter: f64,
    /// Largest frame gap between template and search frames.
    pub max_gap: usize,
    /// Also use annotated distractors as tracking targets.
    pub all_objects: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip_prob: 0.5, brightness: 0.2, center_jitter: 0.5, scale_jitter: 0.25, max_gap: 30, all_objects: true }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, brightness: 0.0, center_jitter: 0.0, scale_jitter: 0.0, max_gap: 0, all_objects: false }
    }
}

fn flip<F: Float>(img: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let data = (0..c * h * w).map(|i| src[i - i % w + (w - 1 - i % w)]).collect();
    Tensor::new(&[c, h, w], data).expect("same shape")
}

/// Box of object `obj` in frame `t`: 0 is the target, `k ≥ 1` the `k`-th distractor.
pub fn object_box<F>(seq: &Sequence<F>, obj: usize, t: usize) -> Result<Box> {
    let b = if obj == 0 { seq.gt.get(t) } else { seq.distractors.get(t).and_then(|d| d.get(obj - 1)) };
    b.copied().ok_or_else(|| contract_err!("no box for object {obj} in frame {t}"))
}

/// Builds a training pair for object `obj` from frame `a` (template) and
/// frame `b` (search), with the search crop centered on the object shifted
/// by `(dx, dy)` pixels and its side multiplied by `scale`.
pub fn make_pair<F: Float>(
    seq: &Sequence<F>,
    obj: usize,
    (a, b): (usize, usize),
    (dx, dy): (f64, f64),
    scale: f64,
    cfg: &ModelConfig,
) -> Result<PairSample<F>> {
    if a >= seq.len() || b >= seq.len() {
        return Err(contract_err!("frames {a}/{b} out of range for {} frames", seq.len()));
    }
    let (z, _) = crop_region(&seq.frames[a], &object_box(seq, obj, a)?, TEMPLATE_FACTOR, cfg.template_size)?;
    let gt = object_box(seq, obj, b)?;
    let (cx, cy) = gt.center();
    let side = SEARCH_FACTOR * gt.area().sqrt() * scale;
    let (x, meta) = crop_at(&seq.frames[b], cx + dx, cy + dy, side, cfg.search_size)?;
    Ok(PairSample { template: z, search: x, gt: meta.to_crop(&gt), meta })
}

/// Random pair with flip, brightness and search-region jitter; crops come back
/// normalized for the model.
pub fn sample_pair<F: Float, R: Rng + ?Sized>(
    seq: &Sequence<F>,
    cfg: &ModelConfig,
    aug: &Augment,
    rng: &mut R,
) -> Result<PairSample<F>> {
    if seq.is_empty() {
        return Err(contract_err!("cannot sample from an empty sequence"));
    }
    let n = seq.len();
    let a = rng.random_range(0..n);
    let lo = a.saturating_sub(aug.max_gap);
    let hi = (a + aug.max_gap).min(n - 1);
    let b = rng.random_range(lo..=hi);
    let objects = if aug.all_objects { 1 + seq.distractors.first().map_or(0, Vec::len) } else { 1 };
    let obj = rng.random_range(0..objects);
    let reach = aug.center_jitter * object_box(seq, obj, b)?.area().sqrt();
    let (dx, dy) = if reach > 0.0 {
        (rng.random_range(-reach..=reach), rng.random_range(-reach..=reach))
    } else {
        (0.0, 0.0)
    };
    let scale = if aug.scale_jitter > 0.0 { rng.random_range(-aug.scale_jitter..=aug.scale_jitter).exp() } else { 1.0 };
    let mut p = make_pair(seq, obj, (a, b), (dx, dy), scale, cfg)?;
    if rng.random::<f64>() < aug.flip_prob {
        p.template = flip(&p.template);
        p.search = flip(&p.search);
        p.gt = p.gt.flip_x(cfg.search_size as f64);
    }
    if aug.brightness > 0.0 {
        for img in [&mut p.template, &mut p.search] {
            let k = F::of(rng.random_range(1.0 - aug.brightness..=1.0 + aug.brightness));
            *img = img.map(|v| (v * k).min(F::one()));
        }
    }
    p.template = normalize_input(&p.template);
    p.search = normalize_input(&p.search);
    Ok(p)
}

/// Source of training pairs.
pub trait PairSource<F: Float> {
    fn next_pair(&mut self, rng: &mut dyn rand::RngCore) -> Result<PairSample<F>>;
}

/// Random augmented pairs from a set of sequences.
pub struct SequencePairs<'a, F> {
    pub sequences: &'a [Sequence<F>],
    pub config: ModelConfig,
    pub augment: Augment,
}

impl<F: Float> PairSource<F> for SequencePairs<'_, F> {
    fn next_pair(&mut self, rng: &mut dyn rand::RngCore) -> Result<PairSample<F>> {
        if self.sequences.is_empty() {
            return Err(contract_err!("no training sequences"));
        }
        let s = rng.random_range(0..self.sequences.len());
        sample_pair(&self.sequences[s], &self.config, &self.augment, rng)
    }
}

/// Cycles through a fixed list of pairs.
pub struct FixedPairs<F> {
    pub pairs: Vec<PairSample<F>>,
    next: usize,
}

impl<F> FixedPairs<F> {
    pub fn new(pairs: Vec<PairSample<F>>) -> Self {
        Self { pairs, next: 0 }
    }
}

impl<F: Float> PairSource<F> for FixedPairs<F> {
    fn next_pair(&mut self, _rng: &mut dyn rand::RngCore) -> Result<PairSample<F>> {
        if self.pairs.is_empty() {
            return Err(contract_err!("no training pairs"));
        }
        let p = self.pairs[self.next % self.pairs.len()].clone();
        self.next += 1;
        Ok(p)
    }
}
