use criterion::{criterion_group, criterion_main, Criterion};
use ipdmix::glmm::{combined_estimate_glmm, fit_study_logistic};
use ipdmix::lmm::{combined_estimate_lmm, VarianceComponents};
use ipdmix::sim::{gen_lmm_dataset, gen_logistic_dataset, ScenarioConfig};
use ipdmix::{GlmmOptions, Partition};
use std::hint::black_box;

fn linear(c: &mut Criterion) {
    let config = ScenarioConfig::uniform_design();
    let data = gen_lmm_dataset(&config, 0).unwrap();
    let k = data.collection.len();
    let vc = VarianceComponents::per_study(config.sigma_alpha_sq, data.sigma_sq.clone()).unwrap();
    let partition = Partition::new(k, &[0, 1, k - 2, k - 1]).unwrap();
    c.bench_function("lmm/combined", |b| {
        b.iter(|| combined_estimate_lmm(black_box(&data.collection), &partition, &vc).unwrap())
    });
}

fn logistic(c: &mut Criterion) {
    let config = ScenarioConfig::logistic(12, 80);
    let data = gen_logistic_dataset(&config, 0).unwrap();
    let study = data.collection.study(0).ipd.clone().unwrap();
    c.bench_function("glmm/study_fit", |b| {
        b.iter(|| fit_study_logistic(black_box(&study)).unwrap())
    });
    let partition = Partition::new(12, &[0, 1, 2, 3, 4, 5]).unwrap();
    let mut group = c.benchmark_group("glmm");
    group.sample_size(10);
    group.bench_function("combined", |b| {
        b.iter(|| {
            combined_estimate_glmm(
                black_box(&data.collection),
                &partition,
                &GlmmOptions::default(),
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, linear, logistic);
criterion_main!(benches);
