use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vizlint::bundled::bundled_tables;
use vizlint::genset::{generate_dataset, sample_spec, GenConfig, SamplerConfig};
use vizlint::par::{self, Execution};
use vizlint::rules::lint;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn batch_lint(c: &mut Criterion) {
    let tables = bundled_tables();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SamplerConfig::default();
    let pairs: Vec<_> = (0..4096)
        .map(|i| {
            let t = &tables[i % tables.len()];
            (sample_spec(&mut rng, t, &cfg), t)
        })
        .collect();
    let mut group = c.benchmark_group("batch_lint");
    group.throughput(Throughput::Elements(pairs.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| par::map(exec, &pairs, |(s, t)| lint(s, t).unwrap().len()))
        });
    }
    group.finish();
}

fn generate(c: &mut Criterion) {
    let tables = bundled_tables();
    let mut group = c.benchmark_group("generate_500");
    group.sample_size(10);
    for (name, execution) in MODES {
        let config = GenConfig {
            target_size: 500,
            execution,
            ..GenConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, config| {
            b.iter(|| black_box(generate_dataset(config, &tables).unwrap().final_kl()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_lint, generate);
criterion_main!(benches);
