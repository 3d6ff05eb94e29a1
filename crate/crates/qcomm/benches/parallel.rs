//! Parallel vs sequential throughput on the crate's two data-parallel
//! workloads: lemma-verification sweeps and minimizer restart batches.
//!
//! The parallel arm runs on the default rayon pool; the sequential arm
//! forces a single-thread pool, which exercises the same code path the
//! crate compiles to without the `parallel` feature.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qcomm::channel::{random_channel, standard_channel, StandardChannel};
use qcomm::fidelity::{min_subspace_fidelity, OptimizerConfig, Subspace};
use qcomm::layout::{Role, SystemLayout};
use qcomm::sweeps::{run_suite, Suite};

#[cfg(feature = "parallel")]
fn single_thread_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool")
}

fn bench_lemma_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("local_from_global_sweep_512");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| run_suite(Suite::LocalFromGlobal, 7, 512).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("pool", "single-thread"), |b| {
        let pool = single_thread_pool();
        b.iter(|| pool.install(|| run_suite(Suite::LocalFromGlobal, 7, 512).unwrap()))
    });
    group.finish();
}

fn bench_minimizer_restarts(c: &mut Criterion) {
    let leg = |label: &str| {
        SystemLayout::single(label, 2, Role::SenderLeg { party: 0, slot: 0 }).unwrap()
    };
    let joint = leg("b0").concat(&leg("b1")).unwrap();
    let channel = {
        let weak = standard_channel(StandardChannel::Depolarizing { p: 0.05 }, &joint).unwrap();
        let noise = random_channel(&joint, &joint, 2, 42).unwrap();
        qcomm::channel::KrausMap::compose(&noise, &weak).unwrap()
    };
    let subspaces = vec![Subspace::full("b0", 2), Subspace::full("b1", 2)];
    let cfg = OptimizerConfig {
        restarts: 24,
        seed: 9,
        ..OptimizerConfig::default()
    };
    let mut group = c.benchmark_group("minimizer_24_restarts");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| min_subspace_fidelity(&subspaces, &channel, &cfg).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("pool", "single-thread"), |b| {
        let pool = single_thread_pool();
        b.iter(|| pool.install(|| min_subspace_fidelity(&subspaces, &channel, &cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_lemma_sweep, bench_minimizer_restarts);
criterion_main!(benches);
