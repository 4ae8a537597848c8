use sbt_core::harness::io::{read_sequence, write_sequence};
use sbt_core::harness::{
    compute_metrics, run_tracker, train_and_evaluate, AblationGrid, DeskData, RunConfig, SceneConfig, SuiteConfig,
};
use sbt_core::model::sidecar_path;
use sbt_core::oracles::run_oracle_checks;
use sbt_core::training::TrainConfig;
use sbt_core::{Model, ModelConfig};

fn small_suite() -> SuiteConfig {
    SuiteConfig { scene: SceneConfig { frames: 6, ..SceneConfig::default() }, train: 3, test: 2, seed: 11 }
}

fn short_schedule() -> TrainConfig {
    TrainConfig { steps: 4, batch: 2, decay_steps: vec![3], probe_every: 0, ..TrainConfig::default() }
}

#[test]
fn train_track_save_reload() {
    let suite = small_suite();
    let data = DeskData::generate(&suite).unwrap();
    assert_eq!(data.train.len(), 3);
    assert_eq!(data.test.len(), 2);

    let run = train_and_evaluate(&ModelConfig::tiny(), &data, &short_schedule(), 5).unwrap();
    assert_eq!(run.log.rows.len(), 4);
    assert!(run.log.rows.iter().all(|r| r.loss_total.is_finite()));
    assert_eq!(run.log.rows[3].lr, run.log.rows[0].lr / 10.0);
    assert_eq!(run.report.sequences.len(), 2);
    let m = run.metrics();
    for v in [m.ao, m.sr50, m.sr75] {
        assert!((0.0..=1.0).contains(&v), "{m:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.sbtw");
    run.model.save(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let loaded = Model::load(&path).unwrap();
    let seq = &data.test[0].1;
    assert_eq!(run_tracker(&loaded, seq).unwrap(), run_tracker(&run.model, seq).unwrap());
}

#[test]
fn load_rejects_mismatched_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sbtw");
    Model::<f32>::new(&ModelConfig::tiny(), 0).unwrap().save(&path).unwrap();
    std::fs::write(sidecar_path(&path), ModelConfig::tiny().siamese_baseline().to_toml()).unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn sequences_survive_disk_round_trip() {
    let data = DeskData::generate(&small_suite()).unwrap();
    let (_, seq) = &data.test[1];
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), seq).unwrap();
    let back = read_sequence(dir.path()).unwrap();
    assert_eq!(back.len(), seq.len());
    for (a, b) in back.gt.iter().zip(&seq.gt) {
        assert!((a.x1 - b.x1).abs() < 1e-4 && (a.y2 - b.y2).abs() < 1e-4);
    }
    for (a, b) in back.frames.iter().zip(&seq.frames) {
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
    }

    let model = Model::<f32>::new(&ModelConfig::tiny(), 1).unwrap();
    let boxes = run_tracker(&model, &back).unwrap();
    assert_eq!(boxes.len(), back.len());
    assert_eq!(boxes[0], back.gt[0]);
    compute_metrics(&boxes[1..], &back.gt[1..]).unwrap();
}

#[test]
fn configs_round_trip_through_toml() {
    let run = RunConfig { suite: small_suite(), train: short_schedule(), ..RunConfig::default() };
    assert_eq!(RunConfig::from_toml(&run.to_toml()).unwrap(), run);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());

    let grid = AblationGrid::tiny_vs_siamese();
    let back = AblationGrid::from_toml(&grid.to_toml()).unwrap();
    assert_eq!(back.configs, grid.configs);
    assert_eq!(back.seeds, grid.seeds);

    let mut dup = grid.clone();
    dup.configs.push(ModelConfig::tiny());
    assert!(AblationGrid::from_toml(&dup.to_toml()).is_err());
}

#[test]
fn oracle_report_is_clean() {
    for check in run_oracle_checks(9).unwrap() {
        assert!(check.passed, "{check}");
    }
}
