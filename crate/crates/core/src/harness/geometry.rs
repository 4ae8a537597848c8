use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Float, Tensor};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(contract_err!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Clipped to `[0,w]×[0,h]`, then widened about its center where needed
    /// so both extents are at least `min_size` (and still inside the frame).
    pub fn clamp_to(&self, w: f64, h: f64, min_size: f64) -> Self {
        fn axis(a: f64, b: f64, len: f64, min: f64) -> (f64, f64) {
            let (mut a, mut b) = (a.clamp(0.0, len), b.clamp(0.0, len));
            if b - a < min {
                let c = ((a + b) / 2.0).clamp(min / 2.0, len - min / 2.0);
                a = c - min / 2.0;
                b = c + min / 2.0;
            }
            (a, b)
        }
        let (x1, x2) = axis(self.x1, self.x2, w, min_size);
        let (y1, y2) = axis(self.y1, self.y2, h, min_size);
        Self { x1, y1, x2, y2 }
    }

    pub fn intersection(&self, other: &Box) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Horizontal mirror inside a frame of width `w`.
    pub fn flip_x(&self, w: f64) -> Self {
        Self { x1: w - self.x2, y1: self.y1, x2: w - self.x1, y2: self.y2 }
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (|C| − |A∪B|)/|C|` with `C` the enclosing box.
pub fn giou(a: &Box, b: &Box) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Placement of a square crop in its source frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropMeta {
    /// Frame coordinates of the crop's top-left corner.
    pub x0: f64,
    pub y0: f64,
    /// Side of the cropped square in frame pixels.
    pub side: f64,
    /// Side of the resized crop in pixels.
    pub out_size: usize,
}

impl CropMeta {
    /// Crop pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    pub fn to_crop(&self, b: &Box) -> Box {
        let s = self.scale();
        Box {
            x1: (b.x1 - self.x0) * s,
            y1: (b.y1 - self.y0) * s,
            x2: (b.x2 - self.x0) * s,
            y2: (b.y2 - self.y0) * s,
        }
    }

    pub fn to_frame(&self, b: &Box) -> Box {
        let s = self.scale();
        Box {
            x1: b.x1 / s + self.x0,
            y1: b.y1 / s + self.y0,
            x2: b.x2 / s + self.x0,
            y2: b.y2 / s + self.y0,
        }
    }
}

/// Side of the context square for a box: `factor · √(w·h)`.
pub fn context_side(b: &Box, factor: f64) -> f64 {
    factor * b.area().sqrt()
}

/// Square crop of side `side` centered at `(cx, cy)`, bilinearly resampled
/// to `out_size²`. Samples outside the frame take the per-channel frame mean.
pub fn crop_at<F: Float>(frame: &Tensor<F>, cx: f64, cy: f64, side: f64, out_size: usize) -> Result<(Tensor<F>, CropMeta)> {
    let &[c, h, w] = frame.shape() else {
        return Err(dim_err!("frame must be [c,h,w], got {:?}", frame.shape()));
    };
    if !(side > 0.0 && side.is_finite()) || out_size == 0 {
        return Err(contract_err!("crop side {side} / output size {out_size} must be positive"));
    }
    let meta = CropMeta { x0: cx - side / 2.0, y0: cy - side / 2.0, side, out_size };
    let data = frame.data();
    let plane = h * w;
    let means: Vec<f64> = (0..c).map(|ch| data[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64).collect();
    let inv = side / out_size as f64;
    let mut out = vec![F::zero(); c * out_size * out_size];
    let taps = |p: f64, len: usize| -> [(Option<usize>, f64); 2] {
        let f = p.floor();
        let t = p - f;
        let i = f as isize;
        let idx = |k: isize| (k >= 0 && (k as usize) < len).then_some(k as usize);
        [(idx(i), 1.0 - t), (idx(i + 1), t)]
    };
    for v in 0..out_size {
        let fy = meta.y0 + (v as f64 + 0.5) * inv - 0.5;
        let ty = taps(fy, h);
        for u in 0..out_size {
            let fx = meta.x0 + (u as f64 + 0.5) * inv - 0.5;
            let tx = taps(fx, w);
            for ch in 0..c {
                let mut acc = 0.0;
                for &(yi, wy) in &ty {
                    for &(xi, wx) in &tx {
                        let val = match (yi, xi) {
                            (Some(yy), Some(xx)) => data[ch * plane + yy * w + xx].as_f64(),
                            _ => means[ch],
                        };
                        acc += wy * wx * val;
                    }
                }
                out[(ch * out_size + v) * out_size + u] = F::of(acc);
            }
        }
    }
    Ok((Tensor::new(&[c, out_size, out_size], out)?, meta))
}

/// Context crop around `b`: side `factor·√(w·h)`, centered on the box.
pub fn crop_region<F: Float>(frame: &Tensor<F>, b: &Box, factor: f64, out_size: usize) -> Result<(Tensor<F>, CropMeta)> {
    b.validate()?;
    if !(factor > 0.0) {
        return Err(contract_err!("crop factor {factor} must be positive"));
    }
    let (cx, cy) = b.center();
    crop_at(frame, cx, cy, context_side(b, factor), out_size)
}
