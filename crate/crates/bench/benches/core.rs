use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ebic::bayes::{quadrature_log_marginal, QuadratureOptions};
use ebic::ising::gibbs_sample;
use ebic::{fit_mle, lasso_path, CoefficientPrior, FitOptions, PathOptions, SupportSet};
use ebic_bench::{fitted, grid_model, logistic_data};

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_mle");
    for &(n, k) in &[(500usize, 3usize), (2000, 10)] {
        let data = logistic_data(n, 20, 1);
        let support = SupportSet::from_indices(0..k);
        group.bench_with_input(BenchmarkId::from_parameter(format!("n{n}_k{k}")), &support, |b, s| {
            b.iter(|| fit_mle(black_box(&data), s, &FitOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_path(c: &mut Criterion) {
    let mut group = c.benchmark_group("lasso_path");
    group.sample_size(10);
    for &(n, p) in &[(200usize, 50usize), (400, 200)] {
        let data = logistic_data(n, p, 2);
        let opts = PathOptions {
            max_support: Some(20),
            ..PathOptions::default()
        };
        group.bench_function(format!("n{n}_p{p}"), |b| b.iter(|| lasso_path(black_box(&data), &opts).unwrap()));
    }
    group.finish();
}

fn bench_gibbs(c: &mut Criterion) {
    let model = grid_model(4, 0.5);
    c.bench_function("gibbs_4x4_3000", |b| {
        b.iter(|| gibbs_sample(black_box(&model), 3000, 100, 1, 7).unwrap())
    });
}

fn bench_quadrature(c: &mut Criterion) {
    let data = logistic_data(500, 5, 3);
    let prior = CoefficientPrior::isotropic_gaussian(5.0).unwrap();
    let mut group = c.benchmark_group("quadrature");
    group.sample_size(10);
    for k in 1..=3usize {
        let fit = fitted(&data, &(0..k).collect::<Vec<_>>());
        group.bench_function(format!("dim{k}"), |b| {
            b.iter(|| quadrature_log_marginal(&data, black_box(&fit), &prior, 0.0, &QuadratureOptions::default()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_fit, bench_path, bench_gibbs, bench_quadrature);
criterion_main!(benches);
