use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, grad_check};
use super::*;
use crate::error::SbtError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, v).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Sliding-window oracle: direct summation with explicit padding lookups.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: PadMode, depthwise: bool) -> Tensor<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = pad.amount() as isize;
    let oh = (h + 2 * pad.amount() - k) / stride + 1;
    let ow = (wd + 2 * pad.amount() - k) / stride + 1;
    let fetch = |ch: usize, y: isize, xx: isize| -> f64 {
        let (hh, ww) = (h as isize, wd as isize);
        match pad {
            PadMode::Circular(_) => x.at(&[ch, y.rem_euclid(hh) as usize, xx.rem_euclid(ww) as usize]),
            _ if y < 0 || y >= hh || xx < 0 || xx >= ww => 0.0,
            _ => x.at(&[ch, y as usize, xx as usize]),
        }
    };
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                let chans: Vec<usize> = if depthwise { vec![o] } else { (0..c).collect() };
                for (ci_w, &ci) in chans.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - p;
                            let xx = (ox * stride + kx) as isize - p;
                            let wi = if depthwise { 0 } else { ci_w };
                            s += w.at(&[o, wi, ky, kx]) * fetch(ci, y, xx);
                        }
                    }
                }
                out.set(&[o, oy, ox], s);
            }
        }
    }
    out
}

fn eval<F: Float>(f: impl FnOnce(&mut Graph<F>) -> Result<Var>) -> Tensor<F> {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

#[test]
fn matmul_identity_and_hand_expanded() {
    let a = t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = eval(|g| {
        let i = g.constant(Tensor::eye(2));
        let a = g.constant(a.clone());
        g.matmul(i, a)
    });
    assert_eq!(out, a);
    let out = eval(|g| {
        let a = g.constant(a.clone());
        let b = g.constant(t32(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        g.matmul(a, b)
    });
    assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut r);
    let expected = naive_matmul(&a, &b);
    let got = eval(|g| {
        let (a, b) = (g.constant(a.cast::<f32>()), g.constant(b.cast::<f32>()));
        g.matmul(a, b)
    });
    assert!(got.cast::<f64>().max_abs_diff(&expected) < 1e-6 * 10.0, "f32 rounding only");
    let got64 = eval(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        g.matmul(a, b)
    });
    assert!(got64.max_abs_diff(&expected) < 1e-6);
}

#[test]
fn matmul_transposed_variants_agree() {
    let mut r = rng(2);
    let a = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[6, 5], 1.0, &mut r);
    let expected = naive_matmul(&a, &b);
    let at = eval(|g| {
        let a = g.constant(a.clone());
        g.transpose(a)
    });
    let bt = eval(|g| {
        let b = g.constant(b.clone());
        g.transpose(b)
    });
    for (lhs, ta) in [(&a, false), (&at, true)] {
        for (rhs, tb) in [(&b, false), (&bt, true)] {
            let got = eval(|g| {
                let (x, y) = (g.constant(lhs.clone()), g.constant(rhs.clone()));
                g.matmul_t(x, y, ta, tb)
            });
            assert!(got.max_abs_diff(&expected) < 1e-12, "ta={ta} tb={tb}");
        }
    }
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(SbtError::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let out = eval(|g| {
        let x = g.constant(t32(&[2], &[0.0, 0.0]));
        g.softmax(x)
    });
    assert_eq!(out.data(), &[0.5, 0.5]);
    let out = eval(|g| {
        let x = g.constant(Tensor::<f64>::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
        g.softmax(x)
    });
    assert!((out.data()[0] - 0.25).abs() < 1e-12 && (out.data()[1] - 0.75).abs() < 1e-12);
    let x = Tensor::<f32>::randn(&[4, 7], 3.0, &mut rng(3));
    let out = eval(|g| {
        let x = g.constant(x.clone());
        g.softmax(x)
    });
    for row in out.data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let out = eval(|g| {
        let x = g.constant(t32(&[3], &[1000.0, 1000.0, -1000.0]));
        g.softmax(x)
    });
    assert!(out.is_finite());
    assert!((out.data()[0] - 0.5).abs() < 1e-6);
}

fn ln_eval(x: &Tensor<f64>, c: usize, eps: f64) -> Tensor<f64> {
    eval(|g| {
        let x = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones(&[c]));
        let beta = g.constant(Tensor::zeros(&[c]));
        g.layer_norm(x, gamma, beta, eps)
    })
}

#[test]
fn layer_norm_examples() {
    let out = ln_eval(&Tensor::full(&[3, 4], 2.5), 4, 1e-5);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let out = ln_eval(&Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap(), 2, 1e-12);
    assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);
    let x = Tensor::<f64>::randn(&[6, 16], 2.0, &mut rng(4)).map(|v| v + 3.0);
    let out = ln_eval(&x, 16, 1e-5);
    for row in out.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn conv2d_identity_and_shape_formula() {
    let x = Tensor::<f32>::randn(&[3, 5, 5], 1.0, &mut rng(5));
    let mut w = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.set(&[c, c, 0, 0], 1.0);
    }
    let out = eval(|g| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        g.conv2d(xv, wv, None, 1, PadMode::Zeros(0))
    });
    assert_eq!(out, x);
    assert_eq!(conv_out_len(256, 7, 4, 3).unwrap(), 64);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::zeros(&[1, 3, 3]));
    let wv = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(g.conv2d(xv, wv, None, 1, PadMode::Valid), Err(SbtError::Dimension(_))));
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut r = rng(6);
    for (stride, pad) in [(1, PadMode::Zeros(1)), (2, PadMode::Zeros(1)), (1, PadMode::Circular(1)), (4, PadMode::Zeros(3)), (1, PadMode::Valid)] {
        let k = if pad == PadMode::Zeros(3) { 7 } else { 3 };
        let x = Tensor::<f64>::randn(&[3, 12, 12], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0 / ((3 * k * k) as f64).sqrt(), &mut r);
        let expected = naive_conv(&x, &w, stride, pad, false);
        let got = eval(|g| {
            let (xv, wv) = (g.constant(x.cast::<f32>()), g.constant(w.cast::<f32>()));
            g.conv2d(xv, wv, None, stride, pad)
        });
        assert_eq!(got.shape(), expected.shape());
        let d = got.cast::<f64>().max_abs_diff(&expected); assert!(d < 1e-5, "stride {stride} pad {pad:?} diff {d}");
    }
}

#[test]
fn depthwise_examples() {
    let mut r = rng(7);
    let x = Tensor::<f32>::randn(&[4, 6, 6], 1.0, &mut r);
    let mut delta = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
    for c in 0..4 {
        delta.set(&[c, 0, 1, 1], 1.0);
    }
    let out = eval(|g| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(delta.clone()));
        g.depthwise_conv2d(xv, wv, PadMode::Zeros(1))
    });
    assert_eq!(out, x);

    let w = Tensor::<f32>::randn(&[4, 1, 3, 3], 1.0, &mut r);
    let run = |x: &Tensor<f32>| {
        eval(|g| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.depthwise_conv2d(xv, wv, PadMode::Circular(1))
        })
    };
    let shifted = run(&x.roll2d(2, -1).unwrap());
    let expected = run(&x).roll2d(2, -1).unwrap();
    assert!(shifted.max_abs_diff(&expected) < 1e-6);

    let x64 = Tensor::<f64>::randn(&[4, 7, 5], 1.0, &mut r);
    let w64 = Tensor::<f64>::randn(&[4, 1, 3, 3], 1.0, &mut r);
    let expected = naive_conv(&x64, &w64, 1, PadMode::Zeros(1), true);
    let got = eval(|g| {
        let (xv, wv) = (g.constant(x64.cast::<f32>()), g.constant(w64.cast::<f32>()));
        g.depthwise_conv2d(xv, wv, PadMode::Zeros(1))
    });
    assert!(got.cast::<f64>().max_abs_diff(&expected) < 1e-5);
}

#[test]
fn activations_and_linear() {
    let out = eval(|g| {
        let x = g.constant(t32(&[3], &[0.0, -1.0, 10.0]));
        Ok(g.gelu(x))
    });
    assert_eq!(out.data()[0], 0.0);
    assert!((out.data()[2] - 10.0).abs() < 1e-4);
    let out = eval(|g| {
        let x = g.constant(t32(&[2], &[-1.0, 2.0]));
        Ok(g.relu(x))
    });
    assert_eq!(out.data(), &[0.0, 2.0]);

    let mut r = rng(8);
    let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[3], 1.0, &mut r);
    let mut expected = naive_matmul(&x, &w);
    for i in 0..5 {
        for j in 0..3 {
            expected.set(&[i, j], expected.at(&[i, j]) + b.data()[j]);
        }
    }
    let got = eval(|g| {
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        g.linear(xv, wv, Some(bv))
    });
    assert!(got.max_abs_diff(&expected) < 1e-6);
}

#[test]
fn backward_square_and_constant_leaf() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(2.0));
    let k = g.variable(Tensor::scalar(5.0));
    let y = g.mul(x, x).unwrap();
    let y = g.add(y, c).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
    assert!(g.grad(c).is_none());
    assert!(g.grad(k).is_none(), "unreachable variable has no gradient");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(SbtError::Contract(_))));
}

/// Scalar probe: `sum(out ⊙ R)` with fixed random `R`, so every output
/// element contributes a distinct weight.
pub(crate) fn probe_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn check_op(n_instances: u64, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy) {
    for seed in 0..n_instances {
        let mut r = rng(100 + seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
        let report = grad_check(
            |g, v| {
                let out = f(g, v)?;
                probe_loss(g, out, seed)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn gradients_of_every_differentiable_op() {
    const N: u64 = 20;
    check_op(N, &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op(N, &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op(N, &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op(N, &[&[3, 4], &[3, 4]], |g, v| {
        let d = g.abs(v[1]);
        let d = g.add_scalar(d, 0.5);
        g.div(v[0], d)
    });
    check_op(N, &[&[3, 4], &[3, 4]], |g, v| g.maximum(v[0], v[1]));
    check_op(N, &[&[3, 4], &[3, 4]], |g, v| g.minimum(v[0], v[1]));
    check_op(N, &[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
    check_op(N, &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.matmul(v[0], v[1]));
    check_op(N, &[&[4, 3], &[5, 4]], |g, v| g.matmul_t(v[0], v[1], true, true));
    check_op(N, &[&[3, 4], &[5, 4]], |g, v| g.matmul_t(v[0], v[1], false, true));
    check_op(N, &[&[4, 3], &[4, 5]], |g, v| g.matmul_t(v[0], v[1], true, false));
    check_op(N, &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op(N, &[&[3, 5]], |g, v| g.softmax(v[0]));
    check_op(N, &[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check_op(N, &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, PadMode::Zeros(1)));
    check_op(N, &[&[2, 5, 5], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 1, PadMode::Circular(1)));
    check_op(N, &[&[3, 5, 4], &[3, 1, 3, 3]], |g, v| g.depthwise_conv2d(v[0], v[1], PadMode::Zeros(1)));
    check_op(N, &[&[3, 5, 4], &[3, 1, 3, 3]], |g, v| g.depthwise_conv2d(v[0], v[1], PadMode::Circular(1)));
    check_op(N, &[&[2, 3, 3]], |g, v| g.pad2d(v[0], 1, 2, 0, 1));
    check_op(N, &[&[12]], |g, v| g.gather(v[0], vec![3, 3, 0, 11, 5], &[5]));
    check_op(N, &[&[3, 4]], |g, v| Ok(g.gelu(v[0])));
    check_op(N, &[&[3, 4]], |g, v| Ok(g.relu(v[0])));
    check_op(N, &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0])));
    check_op(N, &[&[3, 4]], |g, v| {
        let a = g.abs(v[0]);
        let a = g.add_scalar(a, 0.1);
        Ok(g.log(a))
    });
    check_op(N, &[&[3, 4]], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)));
    check_op(N, &[&[3, 4]], |g, v| g.sum_rows(v[0]));
    check_op(N, &[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    check_op(N, &[&[5, 4], &[4, 3], &[3]], |g, v| g.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn corrupted_backward_rule_fails_the_check() {
    let x = Tensor::<f64>::randn(&[10], 1.0, &mut rng(9));
    // GELU value with a ReLU-style derivative.
    let value = |ts: &[Tensor<f64>]| Ok(ts[0].data().iter().map(|&v| kernels::gelu(v)).sum::<f64>());
    let wrong = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let report = check_gradients(value, std::slice::from_ref(&x), &[wrong], 1e-4).unwrap();
    assert!(!report.passed());
    let right = x.map(kernels::gelu_grad);
    let report = check_gradients(value, std::slice::from_ref(&x), &[right], 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in proptest::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let x = Tensor::<f64>::from_f64(&[n], &row).unwrap();
        let run = |x: Tensor<f64>| eval(|g| { let v = g.constant(x); g.softmax(v) });
        let a = run(x.clone());
        let b = run(x.map(|v| v + shift));
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn circular_conv_is_translation_equivariant(seed in 0u64..1000, dy in -4isize..4, dx in -4isize..4) {
        let mut r = rng(seed);
        let x = Tensor::<f32>::randn(&[2, 8, 8], 1.0, &mut r);
        let w = Tensor::<f32>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let run = |x: &Tensor<f32>| eval(|g| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(xv, wv, None, 1, PadMode::Circular(1))
        });
        let lhs = run(&x.roll2d(dy, dx).unwrap());
        let rhs = run(&x).roll2d(dy, dx).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn ops_on_finite_inputs_stay_finite(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::<f32>::randn(&[4, 6], 10.0, &mut r);
        let out = eval(|g| {
            let v = g.constant(x.clone());
            let s = g.softmax(v)?;
            let gl = g.gelu(v);
            let sg = g.sigmoid(gl);
            let gamma = g.constant(Tensor::ones(&[6]));
            let beta = g.constant(Tensor::zeros(&[6]));
            let ln = g.layer_norm(sg, gamma, beta, 1e-5)?;
            g.add(s, ln)
        });
        prop_assert!(out.is_finite());
    }
}

#[test]
fn exp_f32_matches_libm() {
    let mut worst = 0.0f64;
    for k in 0..=20_000 {
        let x = -87.0 + 175.0 * k as f64 / 20_000.0;
        let got = kernels::exp_f32(x as f32) as f64;
        let want = (x as f32 as f64).exp();
        worst = worst.max(((got - want) / want).abs());
    }
    assert!(worst < 5e-7, "relative error {worst}");
    assert_eq!(kernels::exp_f32(0.0), 1.0);
    assert!(kernels::exp_f32(-1e4) >= 0.0 && kernels::exp_f32(-1e4) < 1e-37);
    assert!(kernels::exp_f32(1e4).is_finite());
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(kernels::sigmoid(1e4f32), 1.0);
    assert!(kernels::sigmoid(-1e4f32) < 1e-37);
    assert!((kernels::sigmoid(0.3f64) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);
}
