use serde::{Deserialize, Serialize};

use super::geometry::{crop_region, iou, Box, CropMeta};
use super::scene::Sequence;
use crate::error::{contract_err, dim_err, Result};
use crate::model::{Model, Prediction};
use crate::tensor::{Float, Tensor};

/// Context factor of the template crop.
pub const TEMPLATE_FACTOR: f64 = 2.0;
/// Context factor of the search crop.
pub const SEARCH_FACTOR: f64 = 4.0;

/// Regression outputs are distances in units of half the search crop side.
pub fn reg_unit(crop_size: usize) -> f64 {
    crop_size as f64 / 2.0
}

/// Row-major argmax of a `[1,h,w]` (or `[h,w]`) map; the first maximum wins.
pub fn argmax_cell<F: Float>(cls: &Tensor<F>) -> Result<(usize, usize)> {
    let (h, w) = match cls.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(dim_err!("cls map must be [1,h,w], got {s:?}")),
    };
    let mut best = 0;
    for (i, v) in cls.data().iter().enumerate() {
        if *v > cls.data()[best] {
            best = i;
        }
    }
    debug_assert!(best < h * w);
    Ok((best / w, best % w))
}

/// Center of grid cell `(i, j)` in crop pixels.
pub fn cell_center(i: usize, j: usize, grid: usize, crop_size: usize) -> (f64, f64) {
    let stride = crop_size as f64 / grid as f64;
    ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride)
}

/// Box in crop coordinates at the maximum-confidence cell.
pub fn decode_crop_box<F: Float>(pred: &Prediction<F>, crop_size: usize) -> Result<Box> {
    let (i, j) = argmax_cell(&pred.cls)?;
    let &[4, h, w] = pred.reg.shape() else {
        return Err(dim_err!("reg map must be [4,h,w], got {:?}", pred.reg.shape()));
    };
    if h != w || pred.cls.numel() != h * w {
        return Err(dim_err!("cls {:?} and reg {:?} grids differ", pred.cls.shape(), pred.reg.shape()));
    }
    let (cx, cy) = cell_center(i, j, h, crop_size);
    let u = reg_unit(crop_size);
    let d = |k: usize| pred.reg.at(&[k, i, j]).as_f64().max(0.0) * u;
    Ok(Box { x1: cx - d(0), y1: cy - d(1), x2: cx + d(2), y2: cy + d(3) })
}

/// Decodes the prediction into frame coordinates, clamped to the frame with
/// extents of at least one pixel.
pub fn predict_box<F: Float>(pred: &Prediction<F>, meta: &CropMeta, frame_w: usize, frame_h: usize) -> Result<Box> {
    let b = decode_crop_box(pred, meta.out_size)?;
    Ok(meta.to_frame(&b).clamp_to(frame_w as f64, frame_h as f64, 1.0))
}

/// Maps pixel values in `[0,1]` to the model's input range.
pub fn normalize_input<F: Float>(img: &Tensor<F>) -> Tensor<F> {
    img.map(|v| (v - F::of(0.5)) / F::of(0.25))
}

pub fn template_crop<F: Float>(frame: &Tensor<F>, b: &Box, size: usize) -> Result<(Tensor<F>, CropMeta)> {
    let (crop, meta) = crop_region(frame, b, TEMPLATE_FACTOR, size)?;
    Ok((normalize_input(&crop), meta))
}

pub fn search_crop<F: Float>(frame: &Tensor<F>, b: &Box, size: usize) -> Result<(Tensor<F>, CropMeta)> {
    let (crop, meta) = crop_region(frame, b, SEARCH_FACTOR, size)?;
    Ok((normalize_input(&crop), meta))
}

/// Per-frame tracker output.
#[derive(Clone, Debug)]
pub struct FrameResult<F> {
    pub bbox: Box,
    /// Score map of the search crop (absent for the initial frame).
    pub cls: Option<Tensor<F>>,
}

/// Fixed-template tracking: the template comes from frame 0 at `init`; each
/// later frame is searched around the previous prediction.
pub fn track_frames<F: Float>(model: &Model<F>, frames: &[Tensor<F>], init: Box) -> Result<Vec<FrameResult<F>>> {
    let first = frames.first().ok_or_else(|| contract_err!("sequence has no frames"))?;
    init.validate()?;
    let cfg = model.config();
    let (z, _) = template_crop(first, &init, cfg.template_size)?;
    let cache = model.encode_template(&z)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(FrameResult { bbox: init, cls: None });
    let mut prev = init;
    for frame in &frames[1..] {
        let &[_, h, w] = frame.shape() else {
            return Err(dim_err!("frame must be [3,h,w], got {:?}", frame.shape()));
        };
        let (x, meta) = search_crop(frame, &prev, cfg.search_size)?;
        let pred = model.forward_cached(&cache, &x)?;
        prev = predict_box(&pred, &meta, w, h)?;
        out.push(FrameResult { bbox: prev, cls: Some(pred.cls) });
    }
    Ok(out)
}

/// Boxes for every frame; the first is the given ground truth.
pub fn run_tracker<F: Float>(model: &Model<F>, seq: &Sequence<F>) -> Result<Vec<Box>> {
    let init = *seq.gt.first().ok_or_else(|| contract_err!("sequence has no ground truth"))?;
    Ok(track_frames(model, &seq.frames, init)?.into_iter().map(|r| r.bbox).collect())
}

/// Average overlap and success rates at IoU 0.5 and 0.75.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

pub fn compute_metrics(pred: &[Box], gt: &[Box]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(contract_err!("{} predictions for {} ground-truth boxes", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(contract_err!("no frames to evaluate"));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    Ok(metrics_from_ious(&ious))
}

pub fn metrics_from_ious(ious: &[f64]) -> Metrics {
    let n = ious.len() as f64;
    let rate = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    Metrics { ao: ious.iter().sum::<f64>() / n, sr50: rate(0.5), sr75: rate(0.75) }
}

/// Metrics over frames `1..` (frame 0 is the given initialization).
pub fn evaluate_sequence<F: Float>(model: &Model<F>, seq: &Sequence<F>) -> Result<(Vec<Box>, Metrics)> {
    let pred = run_tracker(model, seq)?;
    if pred.len() < 2 {
        return Err(contract_err!("sequence needs at least two frames"));
    }
    let m = compute_metrics(&pred[1..], &seq.gt[1..])?;
    Ok((pred, m))
}

/// Per-sequence metrics and the frame-weighted suite metrics.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub sequences: Vec<(String, Metrics)>,
    pub overall: Metrics,
}

pub fn evaluate_suite<F: Float>(model: &Model<F>, suite: &[(String, Sequence<F>)]) -> Result<SuiteReport> {
    use rayon::prelude::*;
    let per: Vec<(String, Vec<f64>)> = suite
        .par_iter()
        .map(|(name, seq)| {
            let pred = run_tracker(model, seq)?;
            let ious = pred[1..].iter().zip(&seq.gt[1..]).map(|(p, g)| iou(p, g)).collect();
            Ok((name.clone(), ious))
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if all.is_empty() {
        return Err(contract_err!("suite has no evaluable frames"));
    }
    Ok(SuiteReport {
        sequences: per.into_iter().map(|(n, v)| (n, metrics_from_ious(&v))).collect(),
        overall: metrics_from_ious(&all),
    })
}
