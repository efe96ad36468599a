use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lssat_core::autodiff::Graph;
use lssat_core::data::generate_synthetic;
use lssat_core::texture::{ldp_image, ldp_tensor};
use lssat_core::train::train_step;
use lssat_core::{ExperimentConfig, GrayImage, LssatModel, RngKey, Tensor, TrainState};

fn matmul(c: &mut Criterion) {
    let a = Tensor::new(vec![8, 17, 64], (0..8 * 17 * 64).map(|i| (i % 13) as f64 * 0.1).collect()).unwrap();
    let b = Tensor::new(vec![64, 192], (0..64 * 192).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
    c.bench_function("matmul 8x17x64 @ 64x192 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let w = g.param(b.clone());
            let y = g.matmul(x, w).unwrap();
            let s = g.sum_of_squares(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn ldp(c: &mut Criterion) {
    let pixels: Vec<u8> = (0..224 * 224).map(|i| ((i * 31) % 256) as u8).collect();
    let img = GrayImage::new(224, 224, pixels).unwrap();
    c.bench_function("ldp_image 224x224 k=3", |bench| bench.iter(|| black_box(ldp_image(&img, 3).unwrap())));

    let data = generate_synthetic(4, 2, 32, 0).unwrap();
    let (x, _) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    c.bench_function("ldp_tensor batch 8 32x32", |bench| bench.iter(|| black_box(ldp_tensor(&x, 3).unwrap())));
}

fn training(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk_scale();
    let data = generate_synthetic(4, 2, 32, 0).unwrap();
    let (x, y) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut state = TrainState::new(LssatModel::from_config(&cfg).unwrap(), &cfg, 1000);
    c.bench_function("train_step toy-b batch 8 32x32", |bench| {
        bench.iter(|| black_box(train_step(&mut state, &x, &y, &cfg, RngKey::new(0)).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, ldp, training
}
criterion_main!(benches);
