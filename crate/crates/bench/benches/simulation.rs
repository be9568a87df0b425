use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use neuropubsub::harness::{bundled, run};

fn scenarios(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for name in bundled::USE_CASES {
        let sc = bundled::load(name).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(name), &sc, |b, sc| b.iter(|| run(sc, 1)));
    }
    group.finish();
}

criterion_group!(benches, scenarios);
criterion_main!(benches);
