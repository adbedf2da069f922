use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kdebench_core::dm::RankRule;
use kdebench_core::{
    DatasetName, DensityEstimator, EstimatorConfig, EstimatorKind, Model, SyntheticSpec,
};

const QUERIES: usize = 1_000;
const GAMMA: f64 = 1.0;
const FEATURES: usize = 500;

fn predict(c: &mut Criterion) {
    let spec = SyntheticSpec::new(DatasetName::Mixture2d, 0);
    let queries = spec.sample(QUERIES, 1).unwrap();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for n in [1_000, 10_000, 100_000] {
        let train = spec.sample(n, 2).unwrap();
        for kind in [
            EstimatorKind::Raw,
            EstimatorKind::TreeKd,
            EstimatorKind::TreeBall,
            EstimatorKind::Dmkde,
            EstimatorKind::DmkdeLr,
        ] {
            let mut config = EstimatorConfig::new(kind);
            config.rtol = 1e-4;
            config.rank = RankRule::Auto;
            let model = Model::fit(&config, &train, GAMMA, FEATURES, 3).unwrap();
            group.bench_with_input(BenchmarkId::new(kind.as_str(), n), &queries, |b, q| {
                b.iter(|| black_box(model.estimate_batch(q).unwrap()))
            });
        }
    }
    group.finish();
}

fn fit_density_matrix(c: &mut Criterion) {
    let spec = SyntheticSpec::new(DatasetName::Mixture2d, 0);
    let train = spec.sample(10_000, 2).unwrap();
    let config = EstimatorConfig::new(EstimatorKind::Dmkde);
    let mut group = c.benchmark_group("fit-dmkde");
    group.sample_size(10);
    for d in [100, 500] {
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, &d| {
            b.iter(|| black_box(Model::fit(&config, &train, GAMMA, d, 3).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, predict, fit_density_matrix);
criterion_main!(benches);
