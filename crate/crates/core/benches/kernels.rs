//! Data-parallel kernels under a one-thread pool and the default pool.
//!
//! Build with `--no-default-features` to measure the sequential fallback
//! itself; both groups then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mbocc::cost::cost_block;
use mbocc::eval::{default_tolerance, map_mb};
use mbocc::grids::{FeatureMap, FlowField, RangeTag, ScalarMap};
use mbocc::network::{loss_and_grads, NetConfig, Params};
use mbocc::synthdata::{random_dataset, RandomSceneOptions};
use mbocc::warping::{direct_warp, reverse_warp};
use mbocc::Direction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let build = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    vec![("sequential", build(1)), ("parallel", build(0))]
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (w, h) = (64, 64);
    let fa = FeatureMap::from_fn(w, h, 16, |_, _, _| rng.random()).unwrap();
    let fb = FeatureMap::from_fn(w, h, 16, |_, _, _| rng.random()).unwrap();
    let flow = FlowField::from_fn(w, h, Direction::Forward, |_, _| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).unwrap();
    let map = ScalarMap::from_fn(w, h, RangeTag::Unit, |_, _| rng.random()).unwrap();
    let sample = random_dataset(1, w, h, RandomSceneOptions::default(), 1).remove(0);
    let cfg = NetConfig {
        enc_channels: 8,
        dec_channels: 8,
        ..Default::default()
    };
    let params = Params::init(&cfg, 0).unwrap();
    let tol = default_tolerance(w, h);

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("cost_block_r2", name), |b| {
            b.iter(|| pool.install(|| cost_block(&fa, &fb, &flow, 2).unwrap()))
        });
        group.bench_function(BenchmarkId::new("direct_warp", name), |b| {
            b.iter(|| pool.install(|| direct_warp(&map, &flow).unwrap()))
        });
        group.bench_function(BenchmarkId::new("reverse_warp", name), |b| {
            b.iter(|| pool.install(|| reverse_warp(&map, &flow).unwrap()))
        });
        group.bench_function(BenchmarkId::new("map_mb", name), |b| {
            b.iter(|| pool.install(|| map_mb(&map, &sample.mb1, tol, 25).unwrap()))
        });
        group.bench_function(BenchmarkId::new("loss_and_grads_64px", name), |b| {
            b.iter(|| pool.install(|| loss_and_grads(&sample, &params, &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
