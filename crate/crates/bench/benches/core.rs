use calm_bench::{cloud, regression_problem};
use calm_core::alignment::mmd_value;
use calm_core::data::{make_folds, PropensityModel};
use calm_core::dgp::{gen_baseline, BaselineDgpConfig};
use calm_core::estimators::{fit_method, EstimatorConfig, FitContext, Method};
use calm_core::linmod::{fit_lasso_fixed, LassoConfig};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn lasso(c: &mut Criterion) {
    let mut g = c.benchmark_group("lasso_fixed");
    for p in [10, 40] {
        let (x, y) = regression_problem(500, p, 7);
        g.bench_with_input(BenchmarkId::from_parameter(p), &p, |b, _| {
            b.iter(|| fit_lasso_fixed(black_box(&x), black_box(&y), 0.05, &LassoConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn mmd(c: &mut Criterion) {
    let a = cloud(400, 8, 0.0, 1);
    let b = cloud(400, 8, 0.3, 2);
    c.bench_function("mmd_400x8", |bch| bch.iter(|| mmd_value(black_box(&a), black_box(&b), 1.0).unwrap()));
}

fn linear_pipelines(c: &mut Criterion) {
    let dgp = BaselineDgpConfig::default();
    let data = gen_baseline(&dgp, 3).unwrap();
    let cfg = EstimatorConfig::default();
    let pi = PropensityModel::known(dgp.pi_treated).unwrap();
    let folds = make_folds(data.rct.n(), cfg.n_folds(data.rct.n()), 3).unwrap();
    let ctx = FitContext { os: &data.os, rct: &data.rct, pi: &pi, folds: &folds, config: &cfg, seed: 3 };
    let mut g = c.benchmark_group("fit_default_baseline");
    g.sample_size(10);
    for m in [Method::Naive, Method::Racer, Method::MrOscar] {
        g.bench_function(m.as_str(), |b| b.iter(|| fit_method(m, &ctx).unwrap()));
    }
    g.finish();
}

fn generation(c: &mut Criterion) {
    let dgp = BaselineDgpConfig::default();
    c.bench_function("gen_baseline_default", |b| b.iter(|| gen_baseline(black_box(&dgp), 11).unwrap()));
}

criterion_group!(benches, lasso, mmd, linear_pipelines, generation);
criterion_main!(benches);
