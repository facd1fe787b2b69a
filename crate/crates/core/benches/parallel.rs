//! Parallel vs sequential execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memplug::adapter::{AdapterParams, MemoryUsage, Plugin, PluginParams};
use memplug::knn::Datastore;
use memplug::memory::{build_memory, PhrasePair};
use memplug::nmt::{Pair, TransformerConfig, TransformerParams};
use memplug::par;
use memplug::trainer::evaluate_nll;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn fixture() -> (TransformerParams, Vec<Pair>, Vec<PhrasePair>) {
    let cfg = TransformerConfig::desk(40, 50);
    let layers = cfg.layers;
    let model = TransformerParams::init(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seq = |n: usize, vocab: u32| -> Vec<u32> { (0..n).map(|_| rng.random_range(4..vocab)).collect() };
    let pairs: Vec<Pair> = (0..256)
        .map(|i| Pair {
            src: seq(4 + i % 6, 40),
            tgt: seq(4 + i % 6, 50),
        })
        .collect();
    let phrases = (0..512)
        .map(|i| PhrasePair {
            source: seq(1 + i % 4, 40),
            target: seq(1 + i % 4, 50),
            layer: i % layers,
        })
        .collect();
    (model, pairs, phrases)
}

fn bench(c: &mut Criterion) {
    let (model, pairs, phrases) = fixture();
    let (bank, _) = build_memory(&phrases, &model).unwrap();
    let adapter = PluginParams::Memory(AdapterParams::init(model.config.d_model, model.config.layers, 3, 4.0).unwrap());
    let view = adapter.view(Some(&bank), MemoryUsage::default()).unwrap();
    let mut group = c.benchmark_group("schedule");
    group.sample_size(10);
    for parallel in [false, true] {
        let label = if parallel { "rayon" } else { "sequential" };
        par::set_parallel(parallel);
        group.bench_with_input(BenchmarkId::new("build_memory", label), &phrases, |b, p| {
            b.iter(|| black_box(build_memory(p, &model).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("evaluate_nll", label), &pairs, |b, p| {
            b.iter(|| black_box(evaluate_nll(&model, &view, p).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("datastore", label), &pairs, |b, p| {
            b.iter(|| black_box(Datastore::build(&model, &Plugin::None, p).unwrap()))
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
