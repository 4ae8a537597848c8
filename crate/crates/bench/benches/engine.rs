use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbt_core::oracles::{ca_as_dynamic_conv, ca_attention_path, ProjectionSet};
use sbt_core::blocks::FeatureMap;
use sbt_core::{Graph, PadMode, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::<f32>::randn(&[256, 64], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[64, 256], 1.0, &mut rng);
    c.bench_function("matmul 256x64x256", |bench| {
        bench.iter(|| {
            let mut g = Graph::inference();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[16, 32, 32], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[32, 16, 3, 3], 0.1, &mut rng);
    let dw = Tensor::<f32>::randn(&[16, 1, 3, 3], 0.1, &mut rng);
    c.bench_function("conv2d 16->32 3x3 on 32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::inference();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            black_box(g.conv2d(xv, wv, None, 1, PadMode::Zeros(1)).unwrap());
        })
    });
    c.bench_function("depthwise 3x3 on 16x32x32, fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.variable(x.clone()), g.variable(dw.clone()));
            let y = g.depthwise_conv2d(xv, wv, PadMode::Zeros(1)).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv));
        })
    });
}

fn dynamic_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = FeatureMap::new(Tensor::<f32>::randn(&[16, 8, 8], 1.0, &mut rng)).unwrap();
    let x = FeatureMap::new(Tensor::<f32>::randn(&[16, 16, 16], 1.0, &mut rng)).unwrap();
    let id = ProjectionSet::identity(16);
    c.bench_function("cross attention as two dynamic convs", |b| b.iter(|| black_box(ca_as_dynamic_conv(&z, &x).unwrap())));
    c.bench_function("cross attention direct", |b| b.iter(|| black_box(ca_attention_path(&z, &x, &id).unwrap())));
}

criterion_group!(benches, matmul, conv, dynamic_conv);
criterion_main!(benches);
