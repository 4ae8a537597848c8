use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbt_core::harness::{generate_sequence, run_tracker, SceneConfig};
use sbt_core::training::{sample_pair, Augment, TrainConfig, Trainer};
use sbt_core::{Model, ModelConfig, Tensor};

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let model = Model::<f32>::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Tensor::<f32>::randn(&[3, cfg.template_size, cfg.template_size], 1.0, &mut rng);
    let x = Tensor::<f32>::randn(&[3, cfg.search_size, cfg.search_size], 1.0, &mut rng);
    c.bench_function("tiny forward", |b| b.iter(|| black_box(model.forward(&z, &x).unwrap())));
    let cache = model.encode_template(&z).unwrap();
    c.bench_function("tiny forward, cached template", |b| b.iter(|| black_box(model.forward_cached(&cache, &x).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let seq = generate_sequence(&SceneConfig { frames: 4, ..SceneConfig::default() }, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = vec![sample_pair(&seq, &cfg, &Augment::default(), &mut rng).unwrap()];
    let mut trainer = Trainer::new(Model::<f32>::new(&cfg, 0).unwrap(), TrainConfig::default()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(20);
    group.bench_function("tiny train step, batch 1", |b| b.iter(|| black_box(trainer.train_step(&batch).unwrap())));
    group.finish();
}

fn tracking(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let model = Model::<f32>::new(&cfg, 0).unwrap();
    let seq = generate_sequence(&SceneConfig { frames: 10, ..SceneConfig::default() }, 3).unwrap();
    let mut group = c.benchmark_group("tracking");
    group.sample_size(10);
    group.bench_function("track 10 frames", |b| b.iter(|| black_box(run_tracker(&model, &seq).unwrap())));
    group.finish();
}

criterion_group!(benches, forward, train_step, tracking);
criterion_main!(benches);
