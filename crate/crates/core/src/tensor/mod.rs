//! Dense row-major tensors with a tape-based reverse-mode autodiff.
//!
//! Runtime code uses `f32`; gradient verification runs the same graphs in
//! `f64` (every operator is generic over [`Float`]).

mod graph;
pub mod gradcheck;
pub mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

pub use graph::{Graph, ParamId, ParamStore, Var};

/// Element type of a [`Tensor`].
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// `c = a · b + beta · c` on strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// `exp` used by the hot kernels; a branch-free polynomial for `f32`.
    fn exp_fast(self) -> Self;

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite float")
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path, $exp:path) => {
        impl Float for $t {
            #[inline]
            fn exp_fast(self) -> Self {
                $exp(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) as usize <= c.len(), "gemm: out out of bounds");
                // SAFETY: all three views were bounds-checked above and the
                // strides are non-negative by construction in `kernels`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm, kernels::exp_f32);
impl_float!(f64, matrixmultiply::dgemm, f64::exp);

/// Spatial padding used by the convolution operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadKind {
    #[default]
    Zeros,
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros(usize),
    Circular(usize),
    Valid,
}

impl PadMode {
    pub fn new(kind: PadKind, pad: usize) -> Self {
        match kind {
            PadKind::Zeros => PadMode::Zeros(pad),
            PadKind::Circular => PadMode::Circular(pad),
        }
    }

    pub fn amount(self) -> usize {
        match self {
            PadMode::Zeros(p) | PadMode::Circular(p) => p,
            PadMode::Valid => 0,
        }
    }

    /// Maps a padded coordinate back into `0..len`, or `None` for a zero tap.
    #[inline]
    pub(crate) fn source(self, coord: isize, len: usize) -> Option<usize> {
        let len_i = len as isize;
        if (0..len_i).contains(&coord) {
            return Some(coord as usize);
        }
        match self {
            PadMode::Circular(_) => Some(coord.rem_euclid(len_i) as usize),
            _ => None,
        }
    }
}

/// Output extent of a strided window over a padded axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    let padded = len + 2 * pad;
    if kernel > padded {
        return Err(dim_err!("kernel {kernel} larger than padded input {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(dim_err!("zero extent in shape {shape:?}"));
        }
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::of(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::of(rng.random_range(lo..hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Normal samples redrawn until they fall inside `±2·std`.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break F::of(z * std);
                }
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::of(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            acc * n + i
        })
    }

    /// Circular shift of the two trailing (spatial) axes.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Result<Self> {
        let r = self.shape.len();
        if r < 2 {
            return Err(dim_err!("roll2d needs rank >= 2, got {:?}", self.shape));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let planes = self.numel() / (h * w);
        let mut out = vec![F::zero(); self.numel()];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..h {
                let ty = (y as isize + dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let tx = (x as isize + dx).rem_euclid(w as isize) as usize;
                    out[base + ty * w + tx] = self.data[base + y * w + x];
                }
            }
        }
        Tensor::new(&self.shape, out)
    }
}

#[cfg(test)]
pub(crate) mod tests;
