use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ste_bench::random_matrix;
use ste_core::data::{synth_dataset, SynthSpec};
use ste_core::encoder::{encoder_forward, SteEncoder};
use ste_core::rng::{stream_rng, Stream};
use ste_core::{Model, ModelSpec, ParamStore, SigMode, SteConfig, Tape, TaskWeights, Variant};

fn configs() -> Vec<(&'static str, SteConfig)> {
    let toy = SteConfig::toy();
    let mut pooled = toy.clone();
    pooled.attention.mode = SigMode::Pooled;
    let mut wide = toy.clone();
    wide.attention.d_model = 32;
    wide.attention.heads = 4;
    wide.attention.d_presig = 4;
    vec![("toy", toy), ("toy_pooled", pooled), ("d32_h4_p4", wide)]
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    for (name, cfg) in configs() {
        let mut store = ParamStore::new();
        let enc = SteEncoder::init(&mut store, &cfg, &mut stream_rng(0, Stream::Init)).unwrap();
        let x = random_matrix(16, cfg.d_model(), 5);
        group.bench_function(BenchmarkId::new(name, 16), |b| {
            b.iter(|| {
                let mut tape = Tape::with_params(&store);
                let xv = tape.constant(black_box(&x));
                let mut rng = stream_rng(0, Stream::Dropout);
                encoder_forward(&mut tape, xv, &enc, &cfg, false, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss_backward");
    let records = synth_dataset(16, 1, &SynthSpec::default()).unwrap();
    for variant in [Variant::Ste, Variant::SteNoSt, Variant::Baseline] {
        let mut model = Model::init(&ModelSpec::new(variant, &SteConfig::toy()), 0).unwrap();
        let batch: Vec<_> = records.iter().take(8).collect();
        let weights = TaskWeights::uniform();
        group.bench_function(variant.label(), |b| {
            let mut rng = stream_rng(0, Stream::Dropout);
            b.iter(|| model.batch_loss(&batch, &weights, None, true, true, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
