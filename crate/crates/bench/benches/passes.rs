use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use std::hint::black_box;

use w2w_bench::{desk_config, pairs};
use w2w_core::model::W2wBev;
use w2w_core::optim::AdamW;
use w2w_core::synth::{augment_with, to_tensor};
use w2w_core::train::{sample_batch, train_step, TrainConfig};
use w2w_core::windows::match_descriptors;

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("match_descriptors");
    for n in [4usize, 9, 16] {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..32).map(|k| ((i * 31 + k * 7) % 13) as f64).collect())
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &rows, |b, rows| {
            b.iter(|| match_descriptors(black_box(rows), black_box(rows)))
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = W2wBev::<f32>::new(&desk_config(), 0).unwrap();
    let pair = &pairs(1)[0];
    let mut group = c.benchmark_group("embed");
    for fov in [90.0, 360.0] {
        let input = model
            .prepare_ground(&augment_with(&pair.pano, fov, 0).unwrap())
            .unwrap();
        group.bench_with_input(BenchmarkId::new("ground", fov), &input, |b, input| {
            b.iter(|| model.embed_ground(black_box(input)).unwrap())
        });
    }
    let aerial = to_tensor::<f32>(&pair.aerial);
    group.bench_function("aerial", |b| b.iter(|| model.embed_aerial(black_box(&aerial)).unwrap()));
    group.finish();
}

fn training(c: &mut Criterion) {
    let data = pairs(16);
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("batch4", |b| {
        b.iter_batched(
            || {
                let model = W2wBev::<f32>::new(&desk_config(), 0).unwrap();
                let opt = AdamW::new(&model.store, cfg.weight_decay).unwrap();
                let batch = sample_batch(&model, &data, &cfg, 0).unwrap();
                (model, opt, batch)
            },
            |(mut model, mut opt, batch)| train_step(&mut model, &mut opt, &batch, cfg.lr, cfg.tau).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, matching, forward, training);
criterion_main!(benches);
