use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdd_core::dataset::{render, Domain, FactorVector, DOMAINS};
use mdd_core::sampler::generate;
use mdd_core::{Denoiser, DenoiserConfig, GenerationRequest, NoiseSchedule, Tensor, TimestepVector};

fn inputs(shape: &[usize], phase: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32) * 0.37 + phase).sin()).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn image_config() -> DenoiserConfig {
    DenoiserConfig {
        width: 8,
        channel_mult: vec![1, 2],
        res_blocks: 1,
        groups: 4,
        time_dim: 16,
        ..DenoiserConfig::image(DOMAINS, 3, 32)
    }
}

fn vector_config() -> DenoiserConfig {
    DenoiserConfig {
        width: 64,
        attention_chunk: 64,
        ..DenoiserConfig::vector(DOMAINS, 8)
    }
}

fn bench_render(c: &mut Criterion) {
    let u = FactorVector::from_array([0.3, 0.6, 0.2, 0.8, 0.5, 0.4, 0.7]);
    let mut group = c.benchmark_group("render");
    for size in [16usize, 32, 64] {
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, &size| {
            b.iter(|| {
                for d in [Domain::A, Domain::B, Domain::C] {
                    black_box(render(d, black_box(&u), size).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn bench_training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_gradients");
    group.sample_size(10);
    for (name, cfg, batch) in [("vector", vector_config(), 64usize), ("image32", image_config(), 16)] {
        let model = Denoiser::<f32>::new(cfg.clone()).unwrap();
        let shape = cfg.shape.batch_shape(batch);
        let x: Vec<_> = (0..DOMAINS).map(|d| inputs(&shape, d as f32)).collect();
        let eps: Vec<_> = (0..DOMAINS).map(|d| inputs(&shape, 10.0 + d as f32)).collect();
        let tvecs: Vec<_> = (0..batch)
            .map(|i| TimestepVector::new(vec![1 + i * 7 % 1000, 1000, 1 + i * 13 % 1000], 1000).unwrap())
            .collect();
        let mask = vec![vec![true, false, true]; batch];
        group.bench_function(name, |b| {
            b.iter(|| black_box(model.loss_and_gradients(&x, &tvecs, None, &eps, &mask).unwrap()))
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let cfg = vector_config();
    let model = Denoiser::<f32>::new(cfg.clone()).unwrap();
    let schedule = NoiseSchedule::default();
    let batch = 64;
    let shape = cfg.shape.batch_shape(batch);
    let x: Vec<_> = (0..DOMAINS).map(|d| inputs(&shape, d as f32)).collect();
    let mut group = c.benchmark_group("ddim_vector_b64");
    group.sample_size(10);
    for steps in [10usize, 50] {
        let mut req = GenerationRequest::new(x.clone(), vec![true, false, false], 0);
        req.ddim_steps = steps;
        group.bench_with_input(BenchmarkId::from_parameter(steps), &req, |b, req| {
            b.iter(|| black_box(generate(req, &model, &schedule, |_| {}).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_training_step, bench_sampling);
criterion_main!(benches);
