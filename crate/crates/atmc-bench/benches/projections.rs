use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::hint::black_box;

use atmc_core::model::{ArchitectureSpec, ModelParams};
use atmc_core::projections::{project_topk_global, zero_kmeans, ZkOptions};
use atmc_core::tensor::Tensor;

fn bench_topk(c: &mut Criterion) {
    let arch = ArchitectureSpec::lenet();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut model: ModelParams<f32> = ModelParams::init_factorized(&arch, 0).unwrap();
    // Densify C so the selection scans the full 2M-entry space.
    for t in model.layers.iter_mut() {
        t.c = Tensor::random_uniform(t.c.shape(), -0.1, 0.1, &mut rng);
    }
    c.bench_function("topk_lenet_k21525", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| {
                project_topk_global(&mut m, 21_525);
                m
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

fn bench_zero_kmeans(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for &(n, b) in &[(20_000usize, 8u32), (100_000, 8)] {
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let t = Tensor::from_vec(data);
        c.bench_function(&format!("zero_kmeans_n{}_b{}", n, b), |bench| {
            bench.iter(|| zero_kmeans(black_box(&t), 1 << b, &ZkOptions::default(), 7))
        });
    }
}

criterion_group!(benches, bench_topk, bench_zero_kmeans);
criterion_main!(benches);
