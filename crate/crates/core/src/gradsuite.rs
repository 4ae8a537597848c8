//! Fixed catalogue of float64 gradient checks over engine operators,
//! blocks, the model heads and the training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    eoc_block, mix_mlp_block, mlp_cond_pe, patch_embed, prediction_head, AttnConfig, BlockWeights, HeadWeights, Init,
    MixMlpWeights, MlpWeights, Mode, PatchEmbedWeights, SpatialMixKind, Tokens,
};
use crate::error::Result;
use crate::harness::{Box, CropMeta};
use crate::model::depthwise_xcorr;
use crate::tensor::gradcheck::{grad_check, grad_check_params, GradCheckReport};
use crate::tensor::{Graph, PadKind, PadMode, ParamStore, Tensor, Var};
use crate::training::{assign_targets, cls_loss, cross_entropy, reg_loss, tracking_loss, LossWeights};

/// Relative-error tolerance of every case.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xfeed)));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn randomize(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, std, &mut r);
    }
}

fn op_case(
    name: &str,
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCase> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
    let report = grad_check(
        |g, v| {
            let out = f(g, v)?;
            probe(g, out, seed)
        },
        &inputs,
        GRAD_TOL,
    )?;
    Ok(GradCase { name: name.into(), report })
}

fn param_case(
    name: &str,
    seed: u64,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCase> {
    let report = grad_check_params(
        |g, p, v| {
            let out = f(g, p, v)?;
            probe(g, out, seed)
        },
        store,
        inputs,
        GRAD_TOL,
    )?;
    Ok(GradCase { name: name.into(), report })
}

fn engine_cases(seed: u64) -> Result<Vec<GradCase>> {
    Ok(vec![
        op_case("matmul", seed, &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]))?,
        op_case("batched matmul, transposed operands", seed + 1, &[&[2, 4, 3], &[2, 5, 4]], |g, v| {
            g.matmul_t(v[0], v[1], true, true)
        })?,
        op_case("linear with bias", seed + 2, &[&[5, 3], &[3, 4], &[4]], |g, v| g.linear(v[0], v[1], Some(v[2])))?,
        op_case("conv2d stride 2, zero padding", seed + 3, &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, PadMode::Zeros(1))
        })?,
        op_case("conv2d circular padding", seed + 4, &[&[2, 4, 4], &[2, 2, 3, 3]], |g, v| {
            g.conv2d(v[0], v[1], None, 1, PadMode::Circular(1))
        })?,
        op_case("depthwise conv2d", seed + 5, &[&[3, 5, 4], &[3, 1, 3, 3]], |g, v| {
            g.depthwise_conv2d(v[0], v[1], PadMode::Zeros(1))
        })?,
        op_case("layer norm", seed + 6, &[&[4, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?,
        op_case("softmax rows", seed + 7, &[&[3, 6]], |g, v| g.softmax(v[0]))?,
        op_case("gelu", seed + 8, &[&[4, 5]], |g, v| Ok(g.gelu(v[0])))?,
        op_case("sigmoid", seed + 9, &[&[4, 5]], |g, v| Ok(g.sigmoid(v[0])))?,
        op_case("permute and reshape", seed + 10, &[&[2, 3, 4]], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(p, &[4, 6])
        })?,
        op_case("gather and division", seed + 11, &[&[3, 4], &[3, 4]], |g, v| {
            let a = g.gather(v[0], vec![0, 5, 7, 11], &[2, 2])?;
            let b = g.gather(v[1], vec![1, 2, 3, 4], &[2, 2])?;
            let b = g.mul(b, b)?;
            let b = g.add_scalar(b, 1.0);
            g.div(a, b)
        })?,
    ])
}

fn block_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut r = rng(seed + 100);

    let mut store = ParamStore::new();
    let pe = PatchEmbedWeights::init(&mut Init::new(&mut store, &mut r), "pe", 2, 4, 3, 2);
    randomize(&mut store, 0.5, seed + 101);
    let img = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
    out.push(param_case("patch embedding", seed, &store, &[img], |g, p, v| {
        Ok(patch_embed(g, p, &pe, v[0], PadKind::Zeros)?.var)
    })?);

    let cfg = AttnConfig::new(2, 2, 4)?;
    let mut store = ParamStore::new();
    let blk = BlockWeights::init(&mut Init::new(&mut store, &mut r), "blk", &cfg);
    randomize(&mut store, 0.5, seed + 102);
    let z = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
    let x = Tensor::randn(&[4, 4, 4], 1.0, &mut r);
    for (name, mode) in [("EoC block, self-attention", Mode::SelfAttn), ("EoC block, cross-attention", Mode::CrossAttn)] {
        out.push(param_case(name, seed + 1, &store, &[z.clone(), x.clone()], |g, p, v| {
            let zt = Tokens::from_chw(g, v[0])?;
            let xt = Tokens::from_chw(g, v[1])?;
            let (zo, xo) = eoc_block(g, p, &blk, &cfg, mode, PadKind::Zeros, zt, xt)?;
            let a = probe(g, zo.var, seed + 3)?;
            let b = probe(g, xo.var, seed + 4)?;
            g.add(a, b)
        })?);
    }

    let mut store = ParamStore::new();
    let mlp = MlpWeights::init(&mut Init::new(&mut store, &mut r), "mlp", 3);
    randomize(&mut store, 0.5, seed + 103);
    let f = Tensor::randn(&[3, 3, 3], 1.0, &mut r);
    out.push(param_case("MLP with conditional PE", seed + 2, &store, &[f], |g, p, v| {
        let t = Tokens::from_chw(g, v[0])?;
        Ok(mlp_cond_pe(g, p, &mlp, t, PadKind::Circular)?.var)
    })?);

    for (name, kind) in [("mix-MLP, dense spatial", SpatialMixKind::Dense), ("mix-MLP, circulant spatial", SpatialMixKind::Circulant)] {
        let mut store = ParamStore::new();
        let mix = MixMlpWeights::init(&mut Init::new(&mut store, &mut r), "mmb", 3, (2, 3), kind);
        randomize(&mut store, 0.7, seed + 104);
        let f = Tensor::randn(&[3, 2, 3], 1.0, &mut r);
        out.push(param_case(name, seed + 5, &store, &[f], |g, p, v| {
            let t = Tokens::from_chw(g, v[0])?;
            Ok(mix_mlp_block(g, p, &mix, t)?.var)
        })?);
    }

    let mut store = ParamStore::new();
    let head = HeadWeights::init(&mut Init::new(&mut store, &mut r), "head.reg", 3, (2, 2), 2, 4, SpatialMixKind::Dense);
    randomize(&mut store, 0.7, seed + 105);
    let f = Tensor::randn(&[3, 2, 2], 1.0, &mut r);
    out.push(param_case("prediction head", seed + 6, &store, &[f], |g, p, v| {
        let t = Tokens::from_chw(g, v[0])?;
        prediction_head(g, p, &head, t)
    })?);

    out.push(op_case("depthwise cross-correlation", seed + 7, &[&[3, 2, 2], &[3, 4, 4]], |g, v| {
        let z = Tokens::from_chw(g, v[0])?;
        let x = Tokens::from_chw(g, v[1])?;
        Ok(depthwise_xcorr(g, z, x)?.var)
    })?);
    Ok(out)
}

fn loss_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut r = rng(seed + 200);
    let mut out = Vec::new();
    let w = LossWeights::default();

    let p = Tensor::new(&[1, 3, 3], (0..9).map(|_| r.random_range(0.05..0.95)).collect())?;
    let y = Tensor::new(&[1, 3, 3], (0..9).map(|_| r.random_bool(0.4) as u8 as f64).collect())?;
    let report = grad_check(
        |g, v| {
            let yv = g.constant(y.clone());
            cls_loss(g, v[0], yv)
        },
        std::slice::from_ref(&p),
        GRAD_TOL,
    )?;
    out.push(GradCase { name: "classification BCE".into(), report });

    // predictions kept away from the targets so GIoU's min/max have no ties
    let t: Vec<f64> = (0..36).map(|_| r.random_range(0.1..0.5)).collect();
    let pr: Vec<f64> = t.iter().map(|&v| v + if r.random_bool(0.5) { 0.05 } else { -0.05 }).collect();
    let t = Tensor::new(&[4, 3, 3], t)?;
    let report = grad_check(
        |g, v| {
            let tv = g.constant(t.clone());
            reg_loss(g, v[0], tv, &[0, 2, 4, 5, 8], &w)
        },
        &[Tensor::new(&[4, 3, 3], pr)?],
        GRAD_TOL,
    )?;
    out.push(GradCase { name: "GIoU + L1 regression".into(), report });

    let meta = CropMeta { x0: 0.0, y0: 0.0, side: 64.0, out_size: 64 };
    let targets = assign_targets::<f64>(&Box::new(12.0, 9.0, 40.0, 35.0)?, (4, 4), &meta)?;
    let p = Tensor::new(&[1, 4, 4], (0..16).map(|_| r.random_range(0.05..0.95)).collect())?;
    let reg = Tensor::new(&[4, 4, 4], (0..64).map(|_| r.random_range(0.05..0.2)).collect())?;
    let report = grad_check(|g, v| Ok(tracking_loss(g, v[0], v[1], &targets, &w)?.total), &[p, reg], GRAD_TOL)?;
    out.push(GradCase { name: "weighted tracking loss".into(), report });

    let logits = Tensor::randn(&[5], 1.0, &mut r);
    let report = grad_check(|g, v| cross_entropy(g, v[0], 3), &[logits], GRAD_TOL)?;
    out.push(GradCase { name: "softmax cross-entropy".into(), report });
    Ok(out)
}

/// Runs every case; `seed` varies the random inputs and weights.
pub fn run_grad_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = engine_cases(seed)?;
    cases.extend(block_cases(seed)?);
    cases.extend(loss_cases(seed)?);
    Ok(cases)
}
