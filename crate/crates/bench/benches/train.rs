use criterion::{criterion_group, criterion_main, Criterion};
use ppml_bench::rng;
use ppml_core::data::synth_classification;
use ppml_core::ml::{train_local, Activation};
use ppml_core::{ModelParams, ModelSpec, TrainConfig};

fn train(c: &mut Criterion) {
    let data = synth_classification(400, 20, 4, 7);
    let cfg = TrainConfig {
        local_epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_epoch");
    for (name, spec) in [
        ("logistic", ModelSpec::logistic(20, 4)),
        ("mlp", ModelSpec::mlp(20, &[(16, Activation::Relu)], 4)),
    ] {
        let params = ModelParams::init(&spec, &mut rng(1));
        let mut r = rng(2);
        group.bench_function(name, |b| {
            b.iter(|| train_local(&spec, &params, &data, &cfg, &mut r).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train);
criterion_main!(benches);
