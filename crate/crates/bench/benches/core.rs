use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use typsgd_bench::{family, regression, split};
use typsgd_core::analysis::{enumerate_error, srs_error_formula, typicality_error_corrected};
use typsgd_core::density::{build_partition, kde_densities};
use typsgd_core::embedding::tsne_embed;
use typsgd_core::models::QuadraticModel;
use typsgd_core::optimize::train;
use typsgd_core::sampling::default_plan;
use typsgd_core::{BandwidthRule, BatchPlan, Model, Optimizer, Sampler, Scheme, TrainConfig, TsneConfig};

fn error_formulas(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient_error");
    let grads = family(12, 3);
    let partition = split(12, 5);
    let plan = BatchPlan::new(2, 2, &partition).unwrap();
    group.bench_function("srs_formula_n12", |b| b.iter(|| srs_error_formula(black_box(&grads), 4)));
    group.bench_function("srs_enumeration_n12_m4", |b| {
        b.iter(|| enumerate_error(black_box(&grads), &Scheme::Srs { m: 4 }))
    });
    group.bench_function("corrected_formula_n12", |b| {
        b.iter(|| typicality_error_corrected(black_box(&grads), &partition, &plan))
    });
    let scheme = Scheme::Stratified {
        partition: partition.clone(),
        plan,
    };
    group.bench_function("stratified_enumeration_n12", |b| b.iter(|| enumerate_error(black_box(&grads), &scheme)));
    group.finish();
}

fn embedding_and_density(c: &mut Criterion) {
    let mut group = c.benchmark_group("partition");
    group.sample_size(10);
    for n in [100, 300] {
        let data = regression(n);
        let config = TsneConfig {
            iterations: 250,
            ..TsneConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("tsne_250_iterations", n), &data, |b, data| {
            b.iter(|| tsne_embed(black_box(data), &config))
        });
    }
    let data = regression(2000);
    let emb = tsne_embed(
        &data,
        &TsneConfig {
            iterations: 50,
            ..TsneConfig::default()
        },
    )
    .unwrap();
    group.bench_function("kde_scott_2000", |b| b.iter(|| kde_densities(black_box(&emb), BandwidthRule::Scott)));
    let map = kde_densities(&emb, BandwidthRule::Scott).unwrap();
    group.bench_function("build_partition_2000", |b| b.iter(|| build_partition(black_box(&map), 0.3)));
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    let data = regression(2000);
    let model = QuadraticModel::fitted(&data).unwrap();
    let lr = 1.0 / model.spec().lipschitz_l.unwrap();
    let partition = split(2000, 600);
    let plan = default_plan(50, &partition).unwrap();
    let samplers = [
        Sampler::Srs { n_total: 2000, m: 50 },
        Sampler::typicality(partition, plan).unwrap(),
    ];
    for sampler in &samplers {
        let mut config = TrainConfig::new(500, 1, Optimizer::Sgd { lr });
        config.eval_every = 50;
        group.bench_function(format!("sgd_500_steps_{}", sampler.name()), |b| {
            b.iter(|| train(&model, black_box(&data), None, sampler, &config))
        });
    }
    group.finish();
}

criterion_group!(benches, error_formulas, embedding_and_density, training);
criterion_main!(benches);
