use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rbs_bench::{leaves, small_scenario};
use rbs_core::consensus::{explore_exhaustive, ByzantineMode, ExploreConfig};
use rbs_core::harness::simulate;
use rbs_core::model::{merkle_prove, merkle_root, merkle_verify};

fn merkle(c: &mut Criterion) {
    let mut g = c.benchmark_group("merkle");
    for n in [64usize, 1024] {
        let data = leaves(n);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("root", n), &data, |b, d| {
            b.iter(|| merkle_root(black_box(d)).unwrap())
        });
        let root = merkle_root(&data).unwrap();
        let proof = merkle_prove(&data, n / 3).unwrap();
        g.bench_with_input(BenchmarkId::new("verify", n), &data, |b, d| {
            b.iter(|| merkle_verify(black_box(&proof), &d[n / 3], &root))
        });
    }
    g.finish();
}

fn model_check(c: &mut Criterion) {
    let mut g = c.benchmark_group("explore");
    g.sample_size(10);
    g.bench_function("silent_n4_d2", |b| {
        b.iter(|| {
            explore_exhaustive(ExploreConfig {
                n: 4,
                mode: ByzantineMode::Silent,
                max_round: 1,
                max_height: 1,
                delay_bound: 2,
            })
        })
    });
    g.finish();
}

fn scenario(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for shards in [2usize, 4] {
        let cfg = small_scenario(shards);
        g.bench_with_input(BenchmarkId::from_parameter(shards), &cfg, |b, cfg| {
            b.iter(|| simulate(cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, merkle, model_check, scenario);
criterion_main!(benches);
