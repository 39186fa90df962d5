use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use oneencoder::compute::{l2_normalize, matmul, scaled_dot_attention};
use oneencoder::data::{synth_world, ModalitySpec, SyntheticWorldConfig};
use oneencoder::loss::{alignment_loss, Temperature};
use oneencoder::model::encode_batch;
use oneencoder::pipeline::train_stage1;
use oneencoder::{ModelState, RngStream, TrainConfig, UpConfig};

fn kernels(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("attention");
    for len in [4, 16, 64] {
        let q = rng.normal_tensor(&[len, 16], 1.0);
        let k = rng.normal_tensor(&[len, 16], 1.0);
        let v = rng.normal_tensor(&[len, 16], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |bench, _| {
            bench.iter(|| scaled_dot_attention(black_box(&q), &k, &v).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("alignment_loss");
    for k in [8, 32, 128] {
        let a = l2_normalize(&rng.normal_tensor(&[k, 64], 1.0)).unwrap();
        let b = l2_normalize(&rng.normal_tensor(&[k, 64], 1.0)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, _| {
            bench.iter(|| alignment_loss(black_box(&a), &b, Temperature::default()).unwrap())
        });
    }
    group.finish();
}

fn desk_world() -> oneencoder::data::SyntheticWorld {
    let cfg = SyntheticWorldConfig {
        latent_dim: 8,
        modalities: vec![ModalitySpec::new("a", 4, 64, 101), ModalitySpec::new("b", 4, 64, 202)],
        noise_std: 0.15,
        class_count: None,
        encoder_hidden: 64,
    };
    synth_world(&cfg, 64, 0).unwrap()
}

fn model(c: &mut Criterion) {
    let world = desk_world();
    let (state, _) = train_stage1(
        &world.pair("a", "b").unwrap(),
        UpConfig::desk(),
        &TrainConfig {
            max_steps: Some(1),
            ..TrainConfig::desk_stage1()
        },
    )
    .unwrap();
    let feats = &world.modality("a").unwrap()[..32];
    c.bench_function("encode_batch/32", |bench| {
        bench.iter(|| encode_batch(black_box(&state), "a", feats).unwrap())
    });

    let pair = world.pair("a", "b").unwrap();
    let cfg = TrainConfig {
        max_steps: Some(2),
        ..TrainConfig::desk_stage1()
    };
    c.bench_function("stage1/init_plus_2_steps", |bench| {
        bench.iter(|| train_stage1(black_box(&pair), UpConfig::desk(), &cfg).unwrap())
    });
    c.bench_function("model_init/desk", |bench| {
        bench.iter(|| ModelState::new(UpConfig::desk(), black_box(3)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, model
}
criterion_main!(benches);
