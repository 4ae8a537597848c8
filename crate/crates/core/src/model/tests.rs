use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::{FeatureMap, Mode};
use crate::error::SbtError;
use crate::tensor::Tensor;

fn images(cfg: &ModelConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[3, cfg.template_size, cfg.template_size], 1.0, &mut r);
    let x = Tensor::randn(&[3, cfg.search_size, cfg.search_size], 1.0, &mut r);
    (z, x)
}

fn tiny() -> Model<f32> {
    build_model(&ModelConfig::tiny(), 7).unwrap()
}

fn within(count: usize, target_millions: f64, tol: f64) -> bool {
    let m = count as f64 / 1e6;
    (m - target_millions).abs() <= tol * target_millions
}

#[test]
fn presets_validate() {
    for p in Preset::ALL {
        p.config().validate().unwrap();
        assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
    }
    ModelConfig::tiny_classifier(10).validate().unwrap();
    ModelConfig::light().full_classifier(1000).validate().unwrap();
    ModelConfig::tiny().equivariant().validate().unwrap();
    ModelConfig::tiny().siamese_baseline().validate().unwrap();
    assert!("huge".parse::<Preset>().is_err());
}

#[test]
fn light_backbone_size_matches_table() {
    let m = build_model::<f32>(&ModelConfig::light(), 0).unwrap();
    assert!(within(m.backbone_param_count(), 3.03, 0.2), "{}", m.backbone_param_count());
}

#[test]
fn base_cross_positions_and_size() {
    let cfg = ModelConfig::base();
    assert_eq!(cfg.stages[2].ca_positions, vec![2, 4, 6, 8, 10]);
    assert_eq!(cfg.stages.iter().map(|s| s.depth).collect::<Vec<_>>(), vec![3, 4, 10]);
    let m = build_model::<f32>(&cfg, 0).unwrap();
    assert!(within(m.backbone_param_count(), 21.27, 0.2), "{}", m.backbone_param_count());
}

#[test]
fn full_scale_score_maps_are_32_for_256_search() {
    for p in [Preset::Light, Preset::Small, Preset::Base, Preset::Large] {
        let cfg = p.config();
        assert_eq!(cfg.total_stride(), 8);
        assert_eq!(cfg.score_size(), 32);
    }
}

#[test]
fn param_count_is_deterministic_and_monotone() {
    let base = ModelConfig::tiny();
    let a = build_model::<f32>(&base, 1).unwrap().param_count();
    let b = build_model::<f32>(&base, 2).unwrap().param_count();
    assert_eq!(a, b);
    let mut deeper = base.clone();
    deeper.stages[0].depth += 1;
    let mut wider = base.clone();
    wider.stages[1].patch_embed.channels = 48;
    wider.stages[1].heads = 2;
    assert!(build_model::<f32>(&deeper, 1).unwrap().param_count() > a);
    assert!(build_model::<f32>(&wider, 1).unwrap().param_count() > a);
}

#[test]
fn init_is_deterministic_and_follows_scheme() {
    let a = tiny();
    let b = tiny();
    for ((_, n, ta), (_, _, tb)) in a.store().iter().zip(b.store().iter()) {
        assert_eq!(ta, tb, "{n}");
        if n.ends_with(".gamma") {
            assert!(ta.data().iter().all(|&v| v == 1.0));
        } else if n.ends_with(".b") || n.ends_with(".beta") {
            assert!(ta.data().iter().all(|&v| v == 0.0), "{n}");
        } else if n.ends_with(".sp.w") {
            // spatial mixing starts near identity
            let k = ta.shape()[0];
            for i in 0..k {
                for j in 0..k {
                    let off = ta.at(&[i, j]) - if i == j { 1.0 } else { 0.0 };
                    assert!(off.abs() <= 0.04 + 1e-7, "{n}");
                }
            }
        } else if n.starts_with("head.") {
            // fan-in scaled, truncated at two standard deviations
            let fan_in = ta.shape()[0] as f32;
            assert!(ta.data().iter().all(|&v| v.abs() <= 2.0 * (2.0 / fan_in).sqrt() + 1e-6), "{n}");
        } else {
            assert!(ta.data().iter().all(|&v| v.abs() <= 0.04 + 1e-7), "{n}");
        }
    }
    let c = build_model::<f32>(&ModelConfig::tiny(), 8).unwrap();
    assert_ne!(a.store().get(a.stages()[0].embed.conv), c.store().get(c.stages()[0].embed.conv));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut bad = ModelConfig::tiny();
    bad.stages[2].ca_positions = vec![5];
    assert!(matches!(bad.validate(), Err(SbtError::Config(_))));
    let mut bad = ModelConfig::tiny();
    bad.stages[0].patch_embed.kernel = 6;
    assert!(bad.validate().is_err());
    let mut bad = ModelConfig::tiny();
    bad.stages[1].patch_embed.stride = 3;
    assert!(bad.validate().is_err());
    let mut bad = ModelConfig::tiny();
    bad.search_size = 100;
    assert!(bad.validate().is_err());
    let mut bad = ModelConfig::tiny();
    bad.stages[2].heads = 3;
    assert!(bad.validate().is_err());
    assert!(build_model::<f32>(&bad, 0).is_err());
}

#[test]
fn toml_roundtrip() {
    for cfg in [ModelConfig::tiny(), ModelConfig::base().equivariant(), ModelConfig::tiny_classifier(4)] {
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    let text = r#"
        template_size = 64
        search_size = 128
        [[stages]]
        depth = 1
        heads = 1
        reduction = 1
        patch_embed = { kernel = 7, channels = 8, stride = 4 }
        [[stages]]
        depth = 2
        heads = 2
        reduction = 1
        ca_positions = [2]
        patch_embed = { kernel = 3, channels = 16, stride = 2 }
    "#;
    let cfg = ModelConfig::from_toml(text).unwrap();
    assert_eq!(cfg.head_depth, 2);
    assert_eq!(cfg.score_size(), 16);
    assert!(ModelConfig::from_toml("template_size = 1").is_err());
}

#[test]
fn tiny_forward_shapes_and_ranges() {
    let m = tiny();
    let (z, x) = images(m.config(), 1);
    let p = m.forward(&z, &x).unwrap();
    assert_eq!(p.cls.shape(), &[1, 16, 16]);
    assert_eq!(p.reg.shape(), &[4, 16, 16]);
    for v in p.cls.data().iter().chain(p.reg.data()) {
        assert!(*v > 0.0 && *v < 1.0);
    }
    assert_eq!(m.forward(&z, &x).unwrap(), p, "deterministic");
}

#[test]
fn wrong_input_size_is_dimension_error() {
    let m = tiny();
    let (z, x) = images(m.config(), 1);
    assert!(matches!(m.forward(&x, &x), Err(SbtError::Dimension(_))));
    assert!(matches!(m.forward(&z, &z), Err(SbtError::Dimension(_))));
}

#[test]
fn without_cross_attention_search_ignores_template() {
    let mut cfg = ModelConfig::tiny();
    cfg.stages[2].ca_positions.clear();
    let m = build_model::<f32>(&cfg, 3).unwrap();
    let (z1, x) = images(&cfg, 2);
    let (z2, _) = images(&cfg, 3);
    assert_eq!(m.forward(&z1, &x).unwrap(), m.forward(&z2, &x).unwrap());
}

#[test]
fn search_features_before_first_cross_ignore_template() {
    let m = tiny();
    let (z1, x) = images(m.config(), 4);
    let (z2, _) = images(m.config(), 5);
    let a = m.trace(&z1, &x).unwrap();
    let b = m.trace(&z2, &x).unwrap();
    let first = m.first_cross_step();
    assert!(matches!(a.steps[first], Step::Block { stage: 2, block: 1, mode: Mode::CrossAttn }));
    for i in 0..first {
        assert_eq!(a.x[i], b.x[i], "step {i}");
    }
    for i in first..a.steps.len() {
        assert_ne!(a.x[i], b.x[i], "step {i}");
    }
}

#[test]
fn resume_from_any_step_reproduces_prediction() {
    let m = tiny();
    let (z, x) = images(m.config(), 6);
    let t = m.trace(&z, &x).unwrap();
    assert_eq!(t.prediction, m.forward(&z, &x).unwrap());
    for i in 0..t.steps.len() {
        assert_eq!(m.resume(i + 1, &t.z[i], &t.x[i]).unwrap(), t.prediction, "after step {i}");
    }
}

#[test]
fn cached_template_matches_full_forward() {
    for cfg in [ModelConfig::tiny(), ModelConfig::tiny().siamese_baseline()] {
        let m = build_model::<f32>(&cfg, 9).unwrap();
        let (z, x) = images(&cfg, 10);
        let cache = m.encode_template(&z).unwrap();
        assert_eq!(m.forward_cached(&cache, &x).unwrap(), m.forward(&z, &x).unwrap());
    }
}

#[test]
fn siamese_baseline_uses_template_only_in_head() {
    let cfg = ModelConfig::tiny().siamese_baseline();
    let m = build_model::<f32>(&cfg, 11).unwrap();
    assert!(m.store().id("head.corr.norm.gamma").is_some());
    let (z1, x) = images(&cfg, 12);
    let (z2, _) = images(&cfg, 13);
    let a = m.trace(&z1, &x).unwrap();
    let b = m.trace(&z2, &x).unwrap();
    assert_eq!(a.x.last(), b.x.last());
    assert_ne!(a.prediction.cls, b.prediction.cls);
    assert_eq!(a.prediction.cls.shape(), &[1, 16, 16]);
}

#[test]
fn classifier_outputs_one_logit_per_class() {
    let cfg = ModelConfig::tiny_classifier(5);
    let m = build_model::<f32>(&cfg, 14).unwrap();
    let img = Tensor::randn(&[3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let logits = m.forward_classification(&img).unwrap();
    assert_eq!(logits.shape(), &[5]);
    assert_eq!(m.forward_classification(&img).unwrap(), logits);
    assert!(m.forward(&img, &img).is_err());
    assert!(tiny().forward_classification(&img).is_err());
}

#[test]
fn weights_roundtrip_bit_exact() {
    let m = tiny();
    let mut buf = Vec::new();
    m.write_weights(&mut buf).unwrap();
    let mut fresh = build_model::<f32>(m.config(), 99).unwrap();
    let report = fresh.read_weights(&mut buf.as_slice()).unwrap();
    assert!(report.is_complete());
    let (z, x) = images(m.config(), 15);
    assert_eq!(fresh.forward(&z, &x).unwrap(), m.forward(&z, &x).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.sbtw");
    m.save_weights(&path).unwrap();
    let mut from_file = build_model::<f32>(m.config(), 98).unwrap();
    from_file.load_weights(&path).unwrap();
    assert_eq!(from_file.store().iter().count(), m.store().iter().count());
    for ((_, _, a), (_, _, b)) in from_file.store().iter().zip(m.store().iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn weight_file_layout() {
    let mut buf = Vec::new();
    let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
    write_tensors(&mut buf, [("ab", &t)].into_iter()).unwrap();
    let mut expected = b"SBTW".to_vec();
    for v in [1u32, 1, 2] {
        expected.extend(v.to_le_bytes());
    }
    expected.extend(b"ab");
    for v in [1u32, 2] {
        expected.extend(v.to_le_bytes());
    }
    expected.extend(1.0f32.to_le_bytes());
    expected.extend((-2.0f32).to_le_bytes());
    assert_eq!(buf, expected);
    assert_eq!(read_tensors(&mut buf.as_slice()).unwrap(), vec![("ab".to_string(), t)]);
}

#[test]
fn corrupt_and_truncated_files_are_format_errors() {
    let m = tiny();
    let mut buf = Vec::new();
    m.write_weights(&mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    let mut target = tiny();
    assert!(matches!(target.read_weights(&mut bad.as_slice()), Err(SbtError::Format(_))));
    let cut = &buf[..buf.len() - 3];
    assert!(matches!(target.read_weights(&mut &cut[..]), Err(SbtError::Format(_))));
    assert!(matches!(target.read_weights(&mut &buf[..2]), Err(SbtError::Format(_))));
}

#[test]
fn shape_mismatch_is_load_error_and_leaves_model_intact() {
    let mut wide = ModelConfig::tiny();
    wide.stages[0].patch_embed.channels = 24;
    wide.stages[0].heads = 2;
    let src = build_model::<f32>(&wide, 0).unwrap();
    let mut buf = Vec::new();
    src.write_weights(&mut buf).unwrap();
    let mut target = tiny();
    let before = target.store().clone();
    assert!(matches!(target.read_weights(&mut buf.as_slice()), Err(SbtError::Load(_))));
    for ((_, _, a), (_, _, b)) in target.store().iter().zip(before.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn classifier_weights_initialize_tracker_backbone() {
    let cls = build_model::<f32>(&ModelConfig::tiny_classifier(3), 21).unwrap();
    let mut buf = Vec::new();
    cls.write_weights(&mut buf).unwrap();
    let mut tracker = tiny();
    let report = tracker.read_weights(&mut buf.as_slice()).unwrap();
    assert!(!report.skipped.is_empty());
    assert!(report.skipped.iter().all(|n| n.starts_with("stage4") || n.starts_with("classifier")));
    assert!(report.missing.iter().all(|n| n.starts_with("head.")));
    assert_eq!(report.loaded.len() + report.missing.len(), tracker.store().len());
    let id = tracker.store().id("stage3.block4.attn.q.w").unwrap();
    let src = cls.store().id("stage3.block4.attn.q.w").unwrap();
    assert_eq!(tracker.store().get(id), cls.store().get(src));
}

#[test]
fn feature_snapshot_counts() {
    let m = tiny();
    let (z, x) = images(m.config(), 16);
    let t = m.trace(&z, &x).unwrap();
    assert_eq!(t.steps.len(), 3 + 1 + 1 + 4);
    assert_eq!(t.z.len(), t.steps.len());
    let last: &FeatureMap<f32> = t.x.last().unwrap();
    assert_eq!(last.tensor().shape(), &[64, 16, 16]);
    assert_eq!(t.z.last().unwrap().tensor().shape(), &[64, 8, 8]);
}
