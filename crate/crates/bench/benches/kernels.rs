use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fragility_core::attack::{fgm, fgm_batch, AttackConfig};
use fragility_core::data::{generate_synthetic_benchmark, LabelSet, LabeledImage, NormalizationStats, SplitConfig, SyntheticConfig};
use fragility_core::defense::{ensemble_predict, gaussian_smooth, EnsembleConfig, SmoothingConfig};
use fragility_core::model::{train, MicroDenseNet, ModelConfig, TrainConfig};
use fragility_core::stats::wilson_interval;
use fragility_core::tensor::kernels::{conv2d_forward, ConvGeometry};

fn fixture() -> (MicroDenseNet, Vec<LabeledImage>) {
    let split = SplitConfig {
        per_class_train: 4,
        per_class_test: 4,
        seed: 1,
    };
    let (train_set, test) = generate_synthetic_benchmark(&split, &SyntheticConfig::default()).unwrap();
    let init = MicroDenseNet::new(
        ModelConfig::default(),
        LabelSet::clinical(),
        NormalizationStats::from_images(&train_set).unwrap(),
        1,
    )
    .unwrap();
    // Attacks refuse untrained weights; one short epoch is enough for timing.
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (model, _) = train(&init, &train_set, &tc).unwrap();
    (model, test)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    for &size in &[32usize, 64] {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 8,
            height: size,
            width: size,
            out_channels: 8,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let input: Vec<f32> = (0..8 * size * size).map(|i| (i % 17) as f32 / 17.0).collect();
        let kernel: Vec<f32> = (0..8 * 8 * 9).map(|i| ((i % 7) as f32 - 3.0) / 10.0).collect();
        let bias = vec![0.1f32; 8];
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| conv2d_forward(black_box(&g), black_box(&input), &kernel, &bias))
        });
    }
    group.finish();
}

fn attack(c: &mut Criterion) {
    let (model, test) = fixture();
    let cfg = AttackConfig::new(0.1);
    c.bench_function("fgm_single", |b| b.iter(|| fgm(&model, black_box(&test[0]), &cfg).unwrap()));
    c.bench_function("fgm_batch_12", |b| b.iter(|| fgm_batch(&model, black_box(&test), &cfg).unwrap()));
}

fn defenses(c: &mut Criterion) {
    let (model, test) = fixture();
    let smooth = SmoothingConfig::default();
    c.bench_function("gaussian_smooth", |b| b.iter(|| gaussian_smooth(black_box(&test[0]), &smooth).unwrap()));
    let ens = EnsembleConfig::default();
    c.bench_function("ensemble_predict", |b| b.iter(|| ensemble_predict(&model, black_box(&test[0]), &ens).unwrap()));
}

fn intervals(c: &mut Criterion) {
    c.bench_function("wilson_interval", |b| {
        b.iter(|| wilson_interval(black_box(141), black_box(150), 0.95).unwrap())
    });
}

criterion_group!(benches, conv, attack, defenses, intervals);
criterion_main!(benches);
