use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cdml::archetypes::{preset, ArchetypeKind, VariantFlags};
use cdml::harness::{run_scenario, ScenarioConfig};
use cdml::parallel::{par_map, seq_map};

fn seed_batch(kind: ArchetypeKind, seeds: u64) -> Vec<ScenarioConfig> {
    let base = preset(kind, VariantFlags::default()).unwrap();
    (0..seeds)
        .map(|s| ScenarioConfig {
            seed: s,
            ..base.clone()
        })
        .collect()
}

fn rounds_of(cfg: &ScenarioConfig) -> u64 {
    run_scenario(cfg).unwrap().report.rounds_completed
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("seed_batch");
    group.sample_size(10);
    for kind in [ArchetypeKind::Control, ArchetypeKind::Flexibility] {
        let batch = seed_batch(kind, 16);
        group.bench_with_input(BenchmarkId::new("sequential", kind.name()), &batch, |b, batch| {
            b.iter(|| seq_map(batch, rounds_of))
        });
        group.bench_with_input(BenchmarkId::new("parallel", kind.name()), &batch, |b, batch| {
            b.iter(|| par_map(batch, rounds_of))
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
