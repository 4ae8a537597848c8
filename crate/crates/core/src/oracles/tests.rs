use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::SbtError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f32> {
    FeatureMap::new(Tensor::randn(&[c, h, w], 1.0, &mut rng(seed))).unwrap()
}

#[test]
fn zero_template_leaves_search_unchanged() {
    let z = FeatureMap::new(Tensor::<f32>::zeros(&[8, 3, 3])).unwrap();
    let x = map(8, 5, 4, 1);
    assert_eq!(ca_as_dynamic_conv(&z, &x).unwrap(), x);
}

#[test]
fn single_token_template_is_broadcast() {
    let z = map(8, 1, 1, 2);
    let x = map(8, 4, 4, 3);
    let out = ca_as_dynamic_conv(&z, &x).unwrap();
    for c in 0..8 {
        for y in 0..4 {
            for xx in 0..4 {
                let expected = x.tensor().at(&[c, y, xx]) + z.tensor().at(&[c, 0, 0]);
                assert_eq!(out.tensor().at(&[c, y, xx]), expected);
            }
        }
    }
}

#[test]
fn decomposition_rejects_channel_mismatch() {
    assert!(matches!(ca_as_dynamic_conv(&map(8, 2, 2, 4), &map(16, 2, 2, 5)), Err(SbtError::Dimension(_))));
}

#[test]
fn decomposition_matches_attention_path_on_100_pairs() {
    let worst = dynamic_conv_max_diff(100, 6).unwrap();
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn folded_projections_match_attention_path() {
    let mut r = rng(7);
    for _ in 0..20 {
        let (z, x) = random_pair(&mut r);
        let proj = ProjectionSet::random(x.channels(), 0.3, &mut r);
        let a = ca_as_dynamic_conv_projected(&z, &x, &proj).unwrap();
        let b = ca_attention_path(&z, &x, &proj).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-4);
    }
}

#[test]
fn decomposition_in_f64_is_tighter() {
    let z = FeatureMap::new(Tensor::<f64>::randn(&[8, 3, 4], 1.0, &mut rng(8))).unwrap();
    let x = FeatureMap::new(Tensor::<f64>::randn(&[8, 5, 5], 1.0, &mut rng(9))).unwrap();
    let a = ca_as_dynamic_conv(&z, &x).unwrap();
    let b = ca_attention_path(&z, &x, &ProjectionSet::identity(8)).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-12);
}

/// Flat-index f64 reference for the valid depthwise correlation.
fn dw_reference(z: &Tensor<f32>, x: &Tensor<f32>) -> Vec<f64> {
    let (c, hz, wz) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let (hx, wx) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (hx - hz + 1, wx - wz + 1);
    let (zd, xd) = (z.data(), x.data());
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f64;
                for k in 0..hz * wz {
                    let (ky, kx) = (k / wz, k % wz);
                    s += zd[ch * hz * wz + k] as f64 * xd[(ch * hx + oy + ky) * wx + ox + kx] as f64;
                }
                out.push(s);
            }
        }
    }
    out
}

#[test]
fn depthwise_correlation_examples() {
    let ones = Tensor::<f32>::ones(&[3, 1, 1]);
    let x = Tensor::randn(&[3, 6, 5], 1.0, &mut rng(10));
    assert_eq!(depthwise_correlation(&ones, &x).unwrap(), x);
    let z = Tensor::<f32>::randn(&[2, 8, 8], 1.0, &mut rng(11));
    let x = Tensor::<f32>::randn(&[2, 16, 16], 1.0, &mut rng(12));
    let out = depthwise_correlation(&z, &x).unwrap();
    assert_eq!(out.shape(), &[2, 9, 9]);
    for (a, b) in out.data().iter().zip(dw_reference(&z, &x)) {
        assert!((*a as f64 - b).abs() < 1e-4);
    }
    assert!(out.max_abs_diff(&depthwise_correlation_as_conv(&z, &x).unwrap()) < 1e-4);
    assert!(depthwise_correlation(&x, &z).is_err());
}

#[test]
fn pixelwise_correlation_examples() {
    let z = Tensor::<f32>::randn(&[4, 2, 3], 1.0, &mut rng(13));
    let x = Tensor::<f32>::randn(&[4, 5, 5], 1.0, &mut rng(14));
    let out = pixelwise_correlation(&z, &x).unwrap();
    assert_eq!(out.shape(), &[6, 5, 5]);
    for j in 0..6 {
        for p in 0..25 {
            let direct: f64 = (0..4).map(|c| z.data()[c * 6 + j] as f64 * x.data()[c * 25 + p] as f64).sum();
            assert!((out.data()[j * 25 + p] as f64 - direct).abs() < 1e-4);
        }
    }
    let mut onehot = Tensor::<f32>::zeros(&[4, 1, 1]);
    onehot.set(&[2, 0, 0], 1.0);
    let copy = pixelwise_correlation(&onehot, &x).unwrap();
    assert_eq!(copy.data(), &x.data()[50..75]);
}

fn probe_images(m: &Model<f32>, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let cfg = m.config();
    let mut r = rng(seed);
    (
        Tensor::rand_uniform(&[3, cfg.template_size, cfg.template_size], 0.0, 1.0, &mut r),
        Tensor::rand_uniform(&[3, cfg.search_size, cfg.search_size], 0.0, 1.0, &mut r),
    )
}

#[test]
fn shift_probe_properties() {
    let m = probe_model(15).unwrap();
    let (z, x) = probe_images(&m, 16);
    let cls = m.forward(&z, &x).unwrap().cls;
    let mean = cls.data().iter().sum::<f32>() / cls.numel() as f32;
    let spread = cls.data().iter().map(|v| (v - mean).abs()).fold(0.0f32, f32::max);
    assert!(spread > 1e-2, "score map must not be flat: {spread}");

    assert_eq!(shift_equivariance_probe(&m, &z, &x, 0, 0, PadKind::Zeros).unwrap(), 0.0);
    let circ = shift_equivariance_probe(&m, &z, &x, 8, 0, PadKind::Circular).unwrap();
    let zero = shift_equivariance_probe(&m, &z, &x, 8, 0, PadKind::Zeros).unwrap();
    assert!(circ < 1e-3, "{circ}");
    assert!(zero > circ, "{zero} vs {circ}");
    assert!(matches!(
        shift_equivariance_probe(&m, &z, &x, 4, 0, PadKind::Circular),
        Err(SbtError::Contract(_))
    ));
}

fn hierarchy_model(seed: u64) -> Model<f32> {
    let mut cfg = ModelConfig::tiny();
    cfg.stages[2].ca_positions = vec![2, 3, 4];
    Model::new(&cfg, seed).unwrap()
}

#[test]
fn hierarchy_snapshots_recompose() {
    let m = hierarchy_model(17);
    let (z, x) = probe_images(&m, 18);
    let h = serial_hierarchy_trace(&m, &z, &x).unwrap();
    assert_eq!(h.levels.len(), 3);
    assert!(h.recomposes);
    assert_eq!(h.prediction, m.forward(&z, &x).unwrap());
    for pair in h.levels.windows(2) {
        assert_eq!(pair[0].output.0, pair[1].input.0);
        assert_eq!(pair[0].output.1, pair[1].input.1);
    }
}

#[test]
fn zero_output_weights_make_levels_transparent() {
    let mut m = hierarchy_model(19);
    let names: Vec<String> = m
        .store()
        .iter()
        .filter(|(_, n, _)| n.starts_with("stage3.block") && (n.contains(".attn.proj.") || n.contains(".mlp.fc2.")))
        .map(|(_, n, _)| n.to_string())
        .collect();
    assert_eq!(names.len(), 16);
    for n in names {
        let id = m.store().id(&n).unwrap();
        let shape = m.store().get(id).shape().to_vec();
        *m.store_mut().get_mut(id) = Tensor::zeros(&shape);
    }
    let (z, x) = probe_images(&m, 20);
    let h = serial_hierarchy_trace(&m, &z, &x).unwrap();
    for level in &h.levels {
        assert_eq!(level.output.0, level.input.0);
        assert_eq!(level.output.1, level.input.1);
    }
}

#[test]
fn hierarchy_needs_three_cross_blocks() {
    let m = Model::<f32>::new(&ModelConfig::tiny(), 0).unwrap();
    let (z, x) = probe_images(&m, 21);
    assert!(matches!(serial_hierarchy_trace(&m, &z, &x), Err(SbtError::Contract(_))));
}

#[test]
fn oracle_report_passes() {
    let checks = run_oracle_checks(3).unwrap();
    assert_eq!(checks.len(), 7);
    for c in &checks {
        assert!(c.passed, "{c}");
    }
}
