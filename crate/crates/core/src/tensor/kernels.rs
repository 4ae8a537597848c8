//! Slice-level numeric kernels shared by the graph operators.

use super::{Float, PadMode};

/// `out (+)= op(a) · op(b)` for one matrix pair.
///
/// `a` is stored `[m,k]` (or `[k,m]` when `ta`), `b` is stored `[k,n]`
/// (or `[n,k]` when `tb`), `out` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    F::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

/// Geometry of a 2-D convolution over one `[c,h,w]` image.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: PadMode,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols_len(&self) -> usize {
        self.oh * self.ow
    }

    /// For each output position along one axis and kernel tap, the source index.
    fn taps(len: usize, k: usize, out: usize, stride: usize, pad: PadMode) -> Vec<Option<usize>> {
        let p = pad.amount() as isize;
        let mut taps = Vec::with_capacity(out * k);
        for o in 0..out {
            for t in 0..k {
                let coord = (o * stride) as isize + t as isize - p;
                taps.push(pad.source(coord, len));
            }
        }
        taps
    }
}

/// Unfolds `x` into `[c_in·kh·kw, oh·ow]` columns.
pub fn im2col<F: Float>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let ty = ConvGeom::taps(g.h, g.kh, g.oh, g.stride, g.pad);
    let tx = ConvGeom::taps(g.w, g.kw, g.ow, g.stride, g.pad);
    let l = g.cols_len();
    let mut cols = vec![F::zero(); g.cols_rows() * l];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let Some(sy) = ty[oy * g.kh + ky] else { continue };
                    let src_row = &plane[sy * g.w..(sy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(sx) = tx[ox * g.kw + kx] {
                            *d = src_row[sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<F: Float>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let ty = ConvGeom::taps(g.h, g.kh, g.oh, g.stride, g.pad);
    let tx = ConvGeom::taps(g.w, g.kw, g.ow, g.stride, g.pad);
    let l = g.cols_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let Some(sy) = ty[oy * g.kh + ky] else { continue };
                    for ox in 0..g.ow {
                        if let Some(sx) = tx[ox * g.kw + kx] {
                            plane[sy * g.w + sx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise stride-1 convolution, one `kh×kw` kernel per channel.
pub fn depthwise_forward<F: Float>(x: &[F], w: &[F], g: &ConvGeom, out: &mut [F]) {
    let ty = ConvGeom::taps(g.h, g.kh, g.oh, 1, g.pad);
    let runs = column_runs(g);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dst = &mut out[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
            for ky in 0..g.kh {
                let Some(sy) = ty[oy * g.kh + ky] else { continue };
                let src_row = &plane[sy * g.w..(sy + 1) * g.w];
                for (kx, kruns) in runs.iter().enumerate() {
                    let wv = kern[ky * g.kw + kx];
                    for &(o0, s0, n) in kruns {
                        for (d, &v) in drow[o0..o0 + n].iter_mut().zip(&src_row[s0..s0 + n]) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// For each kernel column, maximal runs `(ox, sx, len)` over which the
/// source column advances with the output column (stride 1).
fn column_runs(g: &ConvGeom) -> Vec<Vec<(usize, usize, usize)>> {
    let tx = ConvGeom::taps(g.w, g.kw, g.ow, 1, g.pad);
    (0..g.kw)
        .map(|kx| {
            let mut runs: Vec<(usize, usize, usize)> = Vec::new();
            for ox in 0..g.ow {
                let Some(sx) = tx[ox * g.kw + kx] else { continue };
                match runs.last_mut() {
                    Some((o0, s0, n)) if *o0 + *n == ox && *s0 + *n == sx => *n += 1,
                    _ => runs.push((ox, sx, 1)),
                }
            }
            runs
        })
        .collect()
}

/// Gradients of [`depthwise_forward`] with respect to input and kernels.
pub fn depthwise_backward<F: Float>(
    x: &[F],
    w: &[F],
    g: &ConvGeom,
    dout: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    let ty = ConvGeom::taps(g.h, g.kh, g.oh, 1, g.pad);
    let runs = column_runs(g);
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.c_in {
        let plane = c * g.h * g.w;
        let kern = c * g.kh * g.kw;
        let go = &dout[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
            for ky in 0..g.kh {
                let Some(sy) = ty[oy * g.kh + ky] else { continue };
                let row = plane + sy * g.w;
                for (kx, kruns) in runs.iter().enumerate() {
                    let wv = w[kern + ky * g.kw + kx];
                    let mut acc = F::zero();
                    for &(o0, s0, n) in kruns {
                        let gs = &grow[o0..o0 + n];
                        if dw.is_some() {
                            acc += gs.iter().zip(&x[row + s0..row + s0 + n]).map(|(&a, &b)| a * b).sum::<F>();
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for (d, &gv) in dx[row + s0..row + s0 + n].iter_mut().zip(gs) {
                                *d += gv * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[kern + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Float>(x: &[F], n: usize, out: &mut [F]) {
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = lane_fold(src, F::neg_infinity(), F::max);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp_fast();
        }
        let inv = F::one() / lane_fold(dst, F::zero(), |a, b| a + b);
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

/// Fold over 8 interleaved lanes so the compiler can vectorize it.
#[inline]
fn lane_fold<F: Float>(v: &[F], init: F, f: impl Fn(F, F) -> F) -> F {
    let mut acc = [init; 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = f(acc[k], c[k]);
        }
    }
    let mut r = tail.iter().fold(init, |a, &b| f(a, b));
    for a in acc {
        r = f(r, a);
    }
    r
}

/// Tanh approximation of GELU and its derivative.
#[inline]
pub fn gelu<F: Float>(x: F) -> F {
    // 0.5·(1 + tanh(u)) = sigmoid(2u)
    x * sigmoid(gelu_inner(x) * F::of(2.0))
}

#[inline]
fn gelu_inner<F: Float>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::of(0.044_715);
    c * (x + a * x * x * x)
}

#[inline]
pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let a = F::of(0.044_715);
    let s = sigmoid(gelu_inner(x) * F::of(2.0));
    let dinner = c * (F::one() + F::of(3.0) * a * x * x);
    s + x * s * (F::one() - s) * F::of(2.0) * dinner
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    let e = (-x.abs()).exp_fast();
    let s = F::one() / (F::one() + e);
    if x >= F::zero() { s } else { e * s }
}

/// `e^x` for `f32` by range reduction to `[-ln2/2, ln2/2]` and a degree-6
/// polynomial; relative error within a few ulp. Inputs are clamped to the
/// normal range, so large negative arguments give ~1e-38 rather than 0.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0; // 1.5·2^23, rounds to nearest integer
    let x = x.clamp(-87.3, 88.0);
    let t = x * std::f32::consts::LOG2_E + MAGIC;
    let n = t - MAGIC;
    let i = t.to_bits() as i32 - MAGIC.to_bits() as i32;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((i + 127) << 23) as u32)
}
