use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{conv_out_len, Float, PadMode, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Shift(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Gather { a: Var, idx: Vec<usize> },
    Pad2d { a: Var, top: usize, left: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Clamp { a: Var, lo: F, hi: F },
    Sum(Var),
    SumRows(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of executed operators; values are recorded in execution order so the
/// tape is topologically sorted by construction.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    bound: HashMap<ParamId, Var>,
    train_params: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    /// Graph whose bound parameters require gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), bound: HashMap::new(), train_params: true }
    }

    /// Graph for inference: parameters are bound as constants.
    pub fn inference() -> Self {
        Self { train_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(value.numel() == value.shape().iter().product::<usize>());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, self.train_params);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// `a[..., n] + bias[n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().ok_or_else(|| dim_err!("add_bias on scalar"))?;
        if self.shape(bias) != [n] {
            return Err(dim_err!("bias {:?} does not match trailing extent {n}", self.shape(bias)));
        }
        let b = self.data(bias);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    /// Batched `op(a) · op(b)` over leading axes; both operands share the batch shape.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dim_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(dim_err!("matmul: inner dims {ka} and {kb} differ ({sa:?} x {sb:?})"));
        }
        let k = ka;
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, batch, m, k, n }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(dim_err!("linear: input {sx:?} does not match weight {sw:?}"));
        }
        let rows = self.value(x).numel() / sw[0];
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {perm:?} is not a permutation of rank {r}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(a), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", self.shape(a)));
        }
        self.permute(a, &[1, 0])
    }

    /// `out.flat[i] = a.flat[idx[i]]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("gather index {bad} out of range {n}"));
        }
        let src = self.data(a);
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Gather { a, idx }, ng))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(dim_err!("slice_rows {start}..{} out of {:?}", start + len, shape));
        }
        let inner: usize = shape[1..].iter().product();
        let idx = (start * inner..(start + len) * inner).collect();
        let mut out = shape;
        out[0] = len;
        self.gather(a, idx, &out)
    }

    /// Zero padding of the two trailing axes of a `[c,h,w]` tensor.
    pub fn pad2d(&mut self, a: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("pad2d needs [c,h,w], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = vec![F::zero(); c * oh * ow];
        let src = self.data(a);
        for ch in 0..c {
            for y in 0..h {
                let d = (ch * oh + y + top) * ow + left;
                out[d..d + w].copy_from_slice(&src[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Pad2d { a, top, left }, ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().ok_or_else(|| dim_err!("softmax on scalar"))?;
        let mut out = vec![F::zero(); self.value(a).numel()];
        kernels::softmax_rows(self.data(a), n, &mut out);
        let value = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Softmax(a), ng))
    }

    /// Normalizes over the trailing axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| dim_err!("layer_norm on scalar"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(dim_err!("layer_norm affine params must be [{n}]"));
        }
        let eps = F::of(eps);
        let nf = F::of(n as f64);
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / n;
        let mut out = vec![F::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (src, dst) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = src.iter().copied().sum::<F>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..n {
                dst[j] = (src[j] - mean) * rstd * gd[j] + bd[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, ng))
    }

    /// `x[c_in,h,w] ⋆ w[c_out,c_in,kh,kw] (+ b[c_out])`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: PadMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(dim_err!("conv2d: input {sx:?} incompatible with weight {sw:?}"));
        }
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("conv2d bias must be [{c_out}]"));
            }
        }
        let geom = conv_geom(&sx, kh, kw, stride, pad)?;
        let cols = kernels::im2col(self.data(x), &geom);
        let l = geom.cols_len();
        let mut out = vec![F::zero(); c_out * l];
        kernels::gemm(c_out, geom.cols_rows(), l, self.data(w), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            for (row, &bv) in out.chunks_exact_mut(l).zip(self.data(b)) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[c_out, geom.oh, geom.ow], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Stride-1 per-channel convolution with `w[c,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: PadMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[1] != 1 {
            return Err(dim_err!("depthwise_conv2d: input {sx:?} incompatible with weight {sw:?}"));
        }
        let geom = conv_geom(&sx, sw[2], sw[3], 1, pad)?;
        let mut out = vec![F::zero(); sx[0] * geom.oh * geom.ow];
        kernels::depthwise_forward(self.data(x), self.data(w), &geom, &mut out);
        let value = Tensor::new(&[sx[0], geom.oh, geom.ow], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(value, Op::Depthwise { x, w, geom }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, F::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, F::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::of(lo), F::of(hi));
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp { a, lo, hi })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<F>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of a matrix: `[m,n] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("sum_rows needs a matrix, got {s:?}"));
        }
        let mut out = vec![F::zero(); s[1]];
        for row in self.data(a).chunks_exact(s[1]) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let value = Tensor::new(&[s[1]], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SumRows(a), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
        }
        Ok(())
    }

    /// Gradient of the last `backward` call for `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient matches value shape"))
    }

    /// Gradients for every bound parameter, indexed like the store.
    pub fn param_grads(&self, store: &ParamStore<F>) -> Vec<Option<Tensor<F>>> {
        store.ids().map(|id| self.bound.get(&id).and_then(|&v| self.grad(v))).collect()
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn acc_from(&mut self, v: Var, g: &[F]) {
        self.acc(v, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        // Temporarily take the op out so the tape can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_from(*a, g);
                self.acc_from(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_from(*a, g);
                self.acc(*b, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let bd = self.data(*b).to_vec();
                let ad = self.data(*a).to_vec();
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&bd).for_each(|((s, &g), &y)| *s += g * y));
                self.acc(*b, |s| s.iter_mut().zip(g).zip(&ad).for_each(|((s, &g), &x)| *s += g * x));
            }
            Op::Div(a, b) => {
                let bd = self.data(*b).to_vec();
                let yd = self.nodes[i].value.data().to_vec();
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&bd).for_each(|((s, &g), &y)| *s += g / y));
                self.acc(*b, |s| {
                    s.iter_mut().zip(g).zip(bd.iter().zip(&yd)).for_each(|((s, &g), (&d, &q))| *s -= g * q / d)
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(op, Op::Maximum(..));
                let pick_a: Vec<bool> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| if is_max { x >= y } else { x <= y })
                    .collect();
                self.acc(*a, |s| {
                    s.iter_mut().zip(g).zip(&pick_a).for_each(|((s, &g), &p)| if p { *s += g })
                });
                self.acc(*b, |s| {
                    s.iter_mut().zip(g).zip(&pick_a).for_each(|((s, &g), &p)| if !p { *s += g })
                });
            }
            Op::AddBias(a, b) => {
                self.acc_from(*a, g);
                let n = self.value(*b).numel();
                self.acc(*b, |s| {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(s, &g)| *s += g);
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(*a, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * k));
            }
            Op::Shift(a) | Op::Reshape(a) => self.acc_from(*a, g),
            &Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                if self.ng(a) {
                    let bd = self.data(b).to_vec();
                    self.acc(a, |s| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bd[i * k * n..(i + 1) * k * n];
                            let si = &mut s[i * m * k..(i + 1) * m * k];
                            if ta {
                                kernels::gemm(k, n, m, bi, tb, gi, true, si, true);
                            } else {
                                kernels::gemm(m, n, k, gi, false, bi, !tb, si, true);
                            }
                        }
                    });
                }
                if self.ng(b) {
                    let ad = self.data(a).to_vec();
                    self.acc(b, |s| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ad[i * m * k..(i + 1) * m * k];
                            let si = &mut s[i * k * n..(i + 1) * k * n];
                            if tb {
                                kernels::gemm(n, m, k, gi, true, ai, ta, si, true);
                            } else {
                                kernels::gemm(k, m, n, ai, !ta, gi, false, si, true);
                            }
                        }
                    });
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut inv = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inv[p] = o;
                }
                let back = permute_data(g, &out_shape, &inv);
                self.acc_from(*a, &back);
            }
            Op::Gather { a, idx } => {
                self.acc(*a, |s| idx.iter().zip(g).for_each(|(&j, &g)| s[j] += g));
            }
            &Op::Pad2d { a, top, left } => {
                let s_in = self.shape(a).to_vec();
                let s_out = self.nodes[i].value.shape().to_vec();
                let (c, h, w) = (s_in[0], s_in[1], s_in[2]);
                let (oh, ow) = (s_out[1], s_out[2]);
                self.acc(a, |s| {
                    for ch in 0..c {
                        for y in 0..h {
                            let src = (ch * oh + y + top) * ow + left;
                            s[(ch * h + y) * w..(ch * h + y + 1) * w]
                                .iter_mut()
                                .zip(&g[src..src + w])
                                .for_each(|(s, &g)| *s += g);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let n = *self.nodes[i].value.shape().last().unwrap();
                self.acc(*a, |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let n = self.value(*gamma).numel();
                let nf = F::of(n as f64);
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gamma).to_vec();
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                for r in 0..xd.len() / n {
                    let xs = &xd[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xhat = F::zero();
                    for j in 0..n {
                        let xhat = (xs[j] - mu) * rs;
                        let dy = gs[j] * gd[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgamma[j] += gs[j] * xhat;
                        dbeta[j] += gs[j];
                    }
                    for j in 0..n {
                        let xhat = (xs[j] - mu) * rs;
                        let dy = gs[j] * gd[j];
                        dx[r * n + j] = rs * (dy - sum_dy / nf - xhat * sum_dy_xhat / nf);
                    }
                }
                self.acc_from(*x, &dx);
                self.acc_from(*gamma, &dgamma);
                self.acc_from(*beta, &dbeta);
            }
            &Op::Conv2d { x, w, b, geom } => {
                let c_out = self.shape(w)[0];
                let l = geom.cols_len();
                let rows = geom.cols_rows();
                if let Some(b) = b {
                    self.acc(b, |s| {
                        for (sv, row) in s.iter_mut().zip(g.chunks_exact(l)) {
                            *sv += row.iter().copied().sum::<F>();
                        }
                    });
                }
                if self.ng(w) {
                    let cols = kernels::im2col(self.data(x), &geom);
                    self.acc(w, |s| kernels::gemm(c_out, l, rows, g, false, &cols, true, s, true));
                }
                if self.ng(x) {
                    let mut dcols = vec![F::zero(); rows * l];
                    kernels::gemm(rows, c_out, l, self.data(w), true, g, false, &mut dcols, false);
                    self.acc(x, |s| kernels::col2im(&dcols, &geom, s));
                }
            }
            &Op::Depthwise { x, w, geom } => {
                let xd = self.data(x).to_vec();
                let wd = self.data(w).to_vec();
                let mut dx = self.ng(x).then(|| vec![F::zero(); xd.len()]);
                let mut dw = self.ng(w).then(|| vec![F::zero(); wd.len()]);
                kernels::depthwise_backward(&xd, &wd, &geom, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    self.acc_from(x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc_from(w, &dw);
                }
            }
            Op::Gelu(a) => {
                let xd = self.data(*a).to_vec();
                self.acc(*a, |s| {
                    s.iter_mut().zip(g).zip(&xd).for_each(|((s, &g), &x)| *s += g * kernels::gelu_grad(x))
                });
            }
            Op::Relu(a) => {
                let xd = self.data(*a).to_vec();
                self.acc(*a, |s| {
                    s.iter_mut().zip(g).zip(&xd).for_each(|((s, &g), &x)| if x > F::zero() { *s += g })
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*a, |s| {
                    s.iter_mut().zip(g).zip(&y).for_each(|((s, &g), &y)| *s += g * y * (F::one() - y))
                });
            }
            Op::Log(a) => {
                let xd = self.data(*a).to_vec();
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&xd).for_each(|((s, &g), &x)| *s += g / x));
            }
            Op::Abs(a) => {
                let xd = self.data(*a).to_vec();
                self.acc(*a, |s| {
                    s.iter_mut().zip(g).zip(&xd).for_each(|((s, &g), &x)| {
                        if x > F::zero() {
                            *s += g
                        } else if x < F::zero() {
                            *s -= g
                        }
                    })
                });
            }
            &Op::Clamp { a, lo, hi } => {
                let xd = self.data(a).to_vec();
                self.acc(a, |s| {
                    s.iter_mut().zip(g).zip(&xd).for_each(|((s, &g), &x)| {
                        if x >= lo && x <= hi {
                            *s += g
                        }
                    })
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::SumRows(a) => {
                let n = g.len();
                self.acc(*a, |s| {
                    for row in s.chunks_exact_mut(n) {
                        row.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn conv_geom(sx: &[usize], kh: usize, kw: usize, stride: usize, pad: PadMode) -> Result<ConvGeom> {
    let (c_in, h, w) = (sx[0], sx[1], sx[2]);
    let p = pad.amount();
    if let PadMode::Circular(p) = pad {
        if p > h || p > w {
            return Err(dim_err!("circular pad {p} exceeds input {h}x{w}"));
        }
    }
    let oh = conv_out_len(h, kh, stride, p)?;
    let ow = conv_out_len(w, kw, stride, p)?;
    Ok(ConvGeom { c_in, h, w, kh, kw, stride, pad, oh, ow })
}

fn transpose_data<F: Float>(src: &[F], rows: usize, cols: usize) -> Vec<F> {
    const B: usize = 16;
    let mut out = vec![F::zero(); src.len()];
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}

fn permute_data<F: Float>(src: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    if perm == [1, 0] {
        return transpose_data(src, shape[0], shape[1]);
    }
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; r];
    let inner = *out_shape.last().unwrap_or(&1);
    let inner_stride = *strides.last().unwrap_or(&1);
    let outer = src.len() / inner.max(1);
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        // odometer over all but the last axis
        for d in (0..r.saturating_sub(1)).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
