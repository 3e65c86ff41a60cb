//! End-to-end benchmarks of short bandit runs.

use criterion::{criterion_group, criterion_main, Criterion};
use opkb::adaopkb::{ada_opkb_run, AlgoParams};
use opkb::baselines::{gpucb_run, GpucbConfig};
use opkb::design::{info_gain, FwOptions};
use opkb::envs::gp_switching_env;
use opkb::kernels::{cholesky_feature_map, gram, Kernel, DEFAULT_JITTER};
use opkb::rng;
use std::hint::black_box;

fn bench_ada_opkb(c: &mut Criterion) {
    let horizon = 1000usize;
    let mut er = rng::stream(1, "environment");
    let kernel = Kernel::rbf(0.2);
    let inst = gp_switching_env(5, 20, &kernel, &[500], 0.8, 0.1, horizon, &mut er).unwrap();
    let k = gram(&kernel, &inst.actions).unwrap();
    let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
    let gamma = info_gain(&map, horizon as f64, 1.0, &FwOptions::default()).unwrap().gamma;
    let params =
        AlgoParams::tuned(1.0, 0.05, horizon, 20, gamma, [0.5, 0.5, 1.0, 0.03, 0.25]).unwrap();
    c.bench_function("ada_opkb_1000_rounds", |b| {
        b.iter(|| {
            let mut lr = rng::stream(1, "learner");
            let mut sr = rng::stream(1, "scheduler");
            ada_opkb_run(black_box(&inst.env), &map, &params, &mut lr, &mut sr).unwrap()
        })
    });
}

fn bench_gpucb(c: &mut Criterion) {
    let horizon = 1000usize;
    let mut er = rng::stream(2, "environment");
    let kernel = Kernel::rbf(0.2);
    let inst = gp_switching_env(5, 20, &kernel, &[], 0.8, 0.1, horizon, &mut er).unwrap();
    let k = gram(&kernel, &inst.actions).unwrap();
    let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
    let config = GpucbConfig { lambda: 0.5, window: Some(300), ..GpucbConfig::default() };
    c.bench_function("sw_gpucb_1000_rounds", |b| {
        b.iter(|| gpucb_run(black_box(&inst.env), &map, &config, horizon).unwrap())
    });
}

criterion_group!(benches, bench_ada_opkb, bench_gpucb);
criterion_main!(benches);
