use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::hint::black_box;

use atmc_core::attacks::{pgd_attack, AttackConfig, ModelTarget};
use atmc_core::kernels::mm_nn_acc;
use atmc_core::model::{ArchitectureSpec, ModelParams};
use atmc_core::tensor::Tensor;

fn rand_vec(n: usize, rng: &mut ChaCha20Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>() - 0.5).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("gemm");
    for &(m, p, n) in &[(50usize, 500usize, 512usize), (128, 800, 500)] {
        let a = rand_vec(m * p, &mut rng);
        let b = rand_vec(p * n, &mut rng);
        group.throughput(Throughput::Elements((2 * m * p * n) as u64));
        group.bench_function(&format!("{}x{}x{}", m, p, n), |bench| {
            bench.iter(|| {
                let mut out = vec![0.0f32; m * n];
                mm_nn_acc(black_box(&a), black_box(&b), &mut out, m, p, n);
                out
            })
        });
    }
    group.finish();
}

fn bench_lenet_forward(c: &mut Criterion) {
    let arch = ArchitectureSpec::lenet();
    let model: ModelParams<f32> = ModelParams::init_factorized(&arch, 0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let x: Tensor<f32> = Tensor::random_uniform(&[32, 1, 28, 28], 0.0, 1.0, &mut rng);
    c.bench_function("lenet_forward_batch32", |b| {
        b.iter(|| model.logits(black_box(&x)).unwrap())
    });
}

fn bench_pgd_step(c: &mut Criterion) {
    let arch = ArchitectureSpec::conv_small();
    let model: ModelParams<f32> = ModelParams::init_factorized(&arch, 0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let x: Tensor<f32> = Tensor::random_uniform(&[16, 1, 28, 28], 0.0, 1.0, &mut rng);
    let y: Vec<usize> = (0..16).map(|i| i % 10).collect();
    let cfg = AttackConfig::pgd(8.0 / 255.0, 4);
    c.bench_function("pgd4_conv_small_batch16", |b| {
        b.iter(|| pgd_attack(&ModelTarget(&model), black_box(&x), &y, &cfg).unwrap())
    });
}

criterion_group!(benches, bench_gemm, bench_lenet_forward, bench_pgd_step);
criterion_main!(benches);
