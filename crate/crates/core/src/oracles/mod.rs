//! Independent reference implementations of the correlation view of
//! cross-attention: attention as two template-generated dynamic filter
//! banks, the depth-wise and pixel-wise correlation baselines, shift probes
//! and the serial cross-attention hierarchy.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{eoc_attention, AttnConfig, AttnWeights, FeatureMap, Init, Mode};
use crate::error::{contract_err, dim_err, Result};
use crate::model::{Model, ModelConfig, Prediction, Step};
use crate::tensor::{Float, Graph, PadKind, PadMode, ParamStore, Tensor};

fn chw<F: Float>(t: &Tensor<F>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(dim_err!("{what} must be [c,h,w], got {s:?}")),
    }
}

/// 1×1 dynamic convolution: `out[o,p] = Σ_i filters[o,i] · input[i,p]`,
/// with `filters` given row-major as `[outs, ins]`.
fn dynamic_pointwise<F: Float>(filters: &[F], outs: usize, input: &[F], ins: usize) -> Vec<F> {
    let positions = input.len() / ins;
    let mut out = vec![F::zero(); outs * positions];
    for o in 0..outs {
        for i in 0..ins {
            let f = filters[o * ins + i];
            for p in 0..positions {
                out[o * positions + p] += f * input[i * positions + p];
            }
        }
    }
    out
}

/// Softmax over the leading axis of a `[n, positions]` array.
fn softmax_columns<F: Float>(a: &mut [F], n: usize) {
    let positions = a.len() / n;
    for p in 0..positions {
        let m = (0..n).map(|j| a[j * positions + p]).fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for j in 0..n {
            let e = (a[j * positions + p] - m).exp();
            a[j * positions + p] = e;
            sum += e;
        }
        for j in 0..n {
            a[j * positions + p] /= sum;
        }
    }
}

/// Generalized decomposition with separate key/value maps:
/// `Inter = RS(keys)ᵀ queries`, `Attn = Softmax_j(Inter)`, `out = values·Attn + residual`.
///
/// `keys`/`values` are `[c, hz, wz]`, `queries`/`residual` are `[c, hx, wx]`.
pub fn two_filter_attention<F: Float>(
    queries: &FeatureMap<F>,
    keys: &FeatureMap<F>,
    values: &FeatureMap<F>,
    residual: &FeatureMap<F>,
) -> Result<FeatureMap<F>> {
    let c = queries.channels();
    if keys.channels() != c || values.channels() != c || residual.channels() != c {
        return Err(dim_err!("channel mismatch between query, key, value and residual maps"));
    }
    if keys.grid() != values.grid() || queries.grid() != residual.grid() {
        return Err(dim_err!("key/value or query/residual grids differ"));
    }
    let t = keys.token_count();
    // First filter bank: one 1×1 filter per template token, its c-vector.
    let kt = transpose(keys.tensor().data(), c, t);
    let mut inter = dynamic_pointwise(&kt, t, queries.tensor().data(), c);
    softmax_columns(&mut inter, t);
    // Second filter bank: per output channel, the template's values over tokens.
    let mut out = dynamic_pointwise(values.tensor().data(), c, &inter, t);
    for (o, r) in out.iter_mut().zip(residual.tensor().data()) {
        *o += *r;
    }
    FeatureMap::new(Tensor::new(residual.tensor().shape(), out)?)
}

fn transpose<F: Float>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Cross-attention of search on template with all projections identity:
/// `out = RS(z)·Softmax(RS(z)ᵀx) + x`.
pub fn ca_as_dynamic_conv<F: Float>(z: &FeatureMap<F>, x: &FeatureMap<F>) -> Result<FeatureMap<F>> {
    if z.channels() != x.channels() {
        return Err(dim_err!("template has {} channels, search {}", z.channels(), x.channels()));
    }
    two_filter_attention(x, z, z, x)
}

/// Projection weights of a single-head, `r = 1` attention layer.
#[derive(Clone, Debug)]
pub struct ProjectionSet<F> {
    /// `[c, c]` each, applied as `tokens · ω`.
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
}

impl<F: Float> ProjectionSet<F> {
    /// Simplified form: raw features as q/k/v, with `ω_q = √c·I`
    /// absorbing the attention path's `1/√d_h` score scale.
    pub fn identity(c: usize) -> Self {
        let mut q = Tensor::eye(c);
        let s = F::of((c as f64).sqrt());
        q.data_mut().iter_mut().for_each(|v| *v *= s);
        Self { q, k: Tensor::eye(c), v: Tensor::eye(c) }
    }

    pub fn random<R: Rng>(c: usize, std: f64, rng: &mut R) -> Self {
        Self {
            q: Tensor::randn(&[c, c], std, rng),
            k: Tensor::randn(&[c, c], std, rng),
            v: Tensor::randn(&[c, c], std, rng),
        }
    }
}

/// Search branch after the block library's cross-attention layer in CA
/// mode, single head, `r = 1`, the given projections, `ω_out = I` and zero biases.
pub fn ca_attention_path<F: Float>(z: &FeatureMap<F>, x: &FeatureMap<F>, proj: &ProjectionSet<F>) -> Result<FeatureMap<F>> {
    let c = x.channels();
    let cfg = AttnConfig::new(1, 1, c)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = AttnWeights::init(&mut Init::new(&mut store, &mut rng), "ca", &cfg);
    *store.get_mut(w.q.w) = proj.q.clone();
    *store.get_mut(w.k.w) = proj.k.clone();
    *store.get_mut(w.v.w) = proj.v.clone();
    *store.get_mut(w.out.w) = Tensor::eye(c);
    let mut g = Graph::inference();
    let zt = z.to_tokens(&mut g, false)?;
    let xt = x.to_tokens(&mut g, false)?;
    let (_, xo) = eoc_attention(&mut g, &store, &w, &cfg, Mode::CrossAttn, zt, xt)?;
    xo.to_feature_map(&mut g)
}

/// Applies `tokens · ω` per position of a `[c,h,w]` map, then scales.
fn project_map<F: Float>(f: &FeatureMap<F>, w: &Tensor<F>, scale: f64) -> Result<FeatureMap<F>> {
    let c = f.channels();
    let wt = transpose(w.data(), c, c);
    let mut out = dynamic_pointwise(&wt, c, f.tensor().data(), c);
    let s = F::of(scale);
    out.iter_mut().for_each(|v| *v *= s);
    FeatureMap::new(Tensor::new(f.tensor().shape(), out)?)
}

/// The decomposition with arbitrary projections folded into the maps first.
pub fn ca_as_dynamic_conv_projected<F: Float>(
    z: &FeatureMap<F>,
    x: &FeatureMap<F>,
    proj: &ProjectionSet<F>,
) -> Result<FeatureMap<F>> {
    let c = x.channels();
    let q = project_map(x, &proj.q, 1.0 / (c as f64).sqrt())?;
    let k = project_map(z, &proj.k, 1.0)?;
    let v = project_map(z, &proj.v, 1.0)?;
    two_filter_attention(&q, &k, &v, x)
}

/// Valid per-channel cross-correlation with the template as kernel:
/// `[c,hx−hz+1,wx−wz+1]`.
pub fn depthwise_correlation<F: Float>(z: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, hz, wz) = chw(z, "template")?;
    let (cx, hx, wx) = chw(x, "search")?;
    if c != cx {
        return Err(dim_err!("template has {c} channels, search {cx}"));
    }
    if hz > hx || wz > wx {
        return Err(dim_err!("template {hz}x{wz} larger than search {hx}x{wx}"));
    }
    let (oh, ow) = (hx - hz + 1, wx - wz + 1);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = F::zero();
                for ky in 0..hz {
                    for kx in 0..wz {
                        s += z.at(&[ch, ky, kx]) * x.at(&[ch, oy + ky, ox + kx]);
                    }
                }
                out.set(&[ch, oy, ox], s);
            }
        }
    }
    Ok(out)
}

/// The same correlation as one dynamic depthwise convolution layer whose
/// kernels are the template reshaped to `[c,1,hz,wz]`.
pub fn depthwise_correlation_as_conv<F: Float>(z: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, hz, wz) = chw(z, "template")?;
    let mut g = Graph::inference();
    let k = g.constant(z.clone().reshape(&[c, 1, hz, wz])?);
    let xv = g.constant(x.clone());
    let out = g.depthwise_conv2d(xv, k, PadMode::Valid)?;
    Ok(g.value(out).clone())
}

/// Each template pixel's c-vector dotted with every search position:
/// `[hz·wz, hx, wx]`.
pub fn pixelwise_correlation<F: Float>(z: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, hz, wz) = chw(z, "template")?;
    let (cx, hx, wx) = chw(x, "search")?;
    if c != cx {
        return Err(dim_err!("template has {c} channels, search {cx}"));
    }
    let mut out = Tensor::zeros(&[hz * wz, hx, wx]);
    for zy in 0..hz {
        for zx in 0..wz {
            for y in 0..hx {
                for xx in 0..wx {
                    let mut s = F::zero();
                    for ch in 0..c {
                        s += z.at(&[ch, zy, zx]) * x.at(&[ch, y, xx]);
                    }
                    out.set(&[zy * wz + zx, y, xx], s);
                }
            }
        }
    }
    Ok(out)
}

/// `max |cls(z, shift(x)) − shift(cls(z, x))|` for a circular shift of the
/// search image by `(dy, dx)` pixels, with the model's convolutions padded
/// as `pad`. Shifts must be multiples of the total stride.
pub fn shift_equivariance_probe<F: Float>(
    model: &Model<F>,
    z: &Tensor<F>,
    x: &Tensor<F>,
    dy: isize,
    dx: isize,
    pad: PadKind,
) -> Result<f64> {
    let s = model.config().total_stride() as isize;
    if dy % s != 0 || dx % s != 0 {
        return Err(contract_err!("shift ({dy},{dx}) is not a multiple of the total stride {s}"));
    }
    let mut m = model.clone();
    m.set_padding(pad);
    let base = m.forward(z, x)?.cls.roll2d(dy / s, dx / s)?;
    let shifted = m.forward(z, &x.roll2d(dy, dx)?)?.cls;
    Ok(shifted.max_abs_diff(&base))
}

/// Features entering and leaving one cross-attention block.
#[derive(Clone, Debug)]
pub struct Level<F> {
    pub step: usize,
    pub input: (FeatureMap<F>, FeatureMap<F>),
    pub output: (FeatureMap<F>, FeatureMap<F>),
}

#[derive(Clone, Debug)]
pub struct HierarchyTrace<F> {
    /// Shallow to deep, one per cross-attention block.
    pub levels: Vec<Level<F>>,
    pub prediction: Prediction<F>,
    /// Whether resuming the network from every level's output snapshot
    /// reproduces `prediction` bit for bit.
    pub recomposes: bool,
}

/// Captures `(z, x)` around each cross-attention block of the serial
/// hierarchy and checks the composition by recomputation from snapshots.
pub fn serial_hierarchy_trace<F: Float>(model: &Model<F>, z: &Tensor<F>, x: &Tensor<F>) -> Result<HierarchyTrace<F>> {
    let trace = model.trace(z, x)?;
    let cross: Vec<usize> = trace
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Step::Block { mode: Mode::CrossAttn, .. }))
        .map(|(i, _)| i)
        .collect();
    if cross.len() < 3 {
        return Err(contract_err!("serial hierarchy needs at least 3 cross-attention blocks, model has {}", cross.len()));
    }
    let mut levels = Vec::with_capacity(cross.len());
    let mut recomposes = true;
    for &i in &cross {
        // Every cross block follows at least one earlier step (the stage's embedding).
        let input = (trace.z[i - 1].clone(), trace.x[i - 1].clone());
        let output = (trace.z[i].clone(), trace.x[i].clone());
        recomposes &= model.resume(i + 1, &output.0, &output.1)? == trace.prediction;
        levels.push(Level { step: i, input, output });
    }
    Ok(HierarchyTrace { levels, prediction: trace.prediction, recomposes })
}

/// One row of the oracle report.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    /// Human-readable acceptance rule.
    pub rule: String,
    pub passed: bool,
}

impl fmt::Display for OracleCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<34} {:>12.3e}  {}", self.name, self.value, self.rule)
    }
}

fn below(name: &'static str, value: f64, tol: f64) -> OracleCheck {
    OracleCheck { name, value, rule: format!("< {tol:e}"), passed: value < tol && value.is_finite() }
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f32> {
    FeatureMap::new(Tensor::randn(&[c, h, w], 1.0, rng)).expect("rank-3 tensor")
}

/// Random `(z, x)` pair with `c ∈ {8,16}` and grids up to 8×8.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (FeatureMap<f32>, FeatureMap<f32>) {
    let c = if rng.random_bool(0.5) { 8 } else { 16 };
    let z = random_map(c, rng.random_range(1..=8), rng.random_range(1..=8), rng);
    let x = random_map(c, rng.random_range(1..=8), rng.random_range(1..=8), rng);
    (z, x)
}

/// Worst disagreement between the decomposition and the attention path over
/// `n` random pairs (identity projections).
pub fn dynamic_conv_max_diff(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (z, x) = random_pair(&mut rng);
        let a = ca_as_dynamic_conv(&z, &x)?;
        let b = ca_attention_path(&z, &x, &ProjectionSet::identity(x.channels()))?;
        worst = worst.max(a.tensor().max_abs_diff(b.tensor()));
    }
    Ok(worst)
}

/// Tiny tracker variant used by the shift probes: circular padding, `r = 1`,
/// circulant heads, weights drawn with a larger spread so the score map is
/// far from constant.
pub fn probe_model(seed: u64) -> Result<Model<f32>> {
    let mut m = Model::new(&ModelConfig::tiny().equivariant(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = m.store().iter().filter(|(_, n, _)| n.ends_with(".w") || n.ends_with(".kernel")).map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = m.store().get(id).shape().to_vec();
        let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
        *m.store_mut().get_mut(id) = Tensor::randn(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng);
    }
    Ok(m)
}

/// Runs every oracle with fixed seeds derived from `seed`.
pub fn run_oracle_checks(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    checks.push(below("dynamic conv, identity projections", dynamic_conv_max_diff(100, seed)?, 1e-5));

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (z, x) = random_pair(&mut rng);
        let proj = ProjectionSet::random(x.channels(), 0.3, &mut rng);
        let a = ca_as_dynamic_conv_projected(&z, &x, &proj)?;
        let b = ca_attention_path(&z, &x, &proj)?;
        worst = worst.max(a.tensor().max_abs_diff(b.tensor()));
    }
    checks.push(below("dynamic conv, folded projections", worst, 1e-4));

    let z = Tensor::<f32>::randn(&[4, 3, 5], 1.0, &mut rng);
    let x = Tensor::<f32>::randn(&[4, 9, 8], 1.0, &mut rng);
    let dw = depthwise_correlation(&z, &x)?;
    let conv = depthwise_correlation_as_conv(&z, &x)?;
    checks.push(below("dw-corr as one dynamic conv", dw.max_abs_diff(&conv), 1e-4));

    let pix = pixelwise_correlation(&z, &x)?;
    let mut worst = 0.0f64;
    for j in 0..15 {
        let (zy, zx) = (j / 5, j % 5);
        for y in 0..9 {
            for xx in 0..8 {
                let direct: f64 = (0..4).map(|c| z.at(&[c, zy, zx]) as f64 * x.at(&[c, y, xx]) as f64).sum();
                worst = worst.max((pix.at(&[j, y, xx]) as f64 - direct).abs());
            }
        }
    }
    checks.push(below("pix-corr vs direct dot products", worst, 1e-4));

    let model = probe_model(seed)?;
    let cfg = model.config().clone();
    let z = Tensor::<f32>::rand_uniform(&[3, cfg.template_size, cfg.template_size], 0.0, 1.0, &mut rng);
    let x = Tensor::<f32>::rand_uniform(&[3, cfg.search_size, cfg.search_size], 0.0, 1.0, &mut rng);
    let s = cfg.total_stride() as isize;
    let mut circ = 0.0f64;
    let mut zero = 0.0f64;
    for (dy, dx) in [(s, 0), (0, s), (-s, s)] {
        circ = circ.max(shift_equivariance_probe(&model, &z, &x, dy, dx, PadKind::Circular)?);
        zero = zero.max(shift_equivariance_probe(&model, &z, &x, dy, dx, PadKind::Zeros)?);
    }
    checks.push(below("shift probe, circular padding", circ, 1e-3));
    checks.push(OracleCheck {
        name: "shift probe, zero padding",
        value: zero,
        rule: format!("> circular ({circ:.3e})"),
        passed: zero > circ,
    });

    let mut hcfg = ModelConfig::tiny();
    hcfg.stages[2].ca_positions = vec![2, 3, 4];
    let hm = Model::<f32>::new(&hcfg, seed)?;
    let z = Tensor::<f32>::randn(&[3, hcfg.template_size, hcfg.template_size], 1.0, &mut rng);
    let x = Tensor::<f32>::randn(&[3, hcfg.search_size, hcfg.search_size], 1.0, &mut rng);
    let h = serial_hierarchy_trace(&hm, &z, &x)?;
    checks.push(OracleCheck {
        name: "serial hierarchy recomposition",
        value: h.levels.len() as f64,
        rule: "bit-exact from every level".into(),
        passed: h.recomposes && h.levels.len() == 3,
    });
    Ok(checks)
}

#[cfg(test)]
mod tests;
