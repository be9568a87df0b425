use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use neuropubsub::placement::{cost, place_oracle, place_upstream};
use neuropubsub_bench::ChainInstance;

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("placement");
    for (stages, nodes) in [(2, 3), (4, 4), (4, 6)] {
        let inst = ChainInstance::new(stages, nodes);
        let label = format!("{stages}x{nodes}");
        group.bench_with_input(BenchmarkId::new("oracle", &label), &inst, |b, i| b.iter(|| place_oracle(&i.problem())));
        group.bench_with_input(BenchmarkId::new("upstream", &label), &inst, |b, i| {
            b.iter(|| place_upstream(&i.problem()))
        });
    }
    group.finish();
}

fn evaluate(c: &mut Criterion) {
    let inst = ChainInstance::new(4, 6);
    let placement = place_upstream(&inst.problem()).unwrap();
    c.bench_function("cost/4x6", |b| b.iter(|| cost(&placement, &inst.problem())));
}

criterion_group!(benches, search, evaluate);
criterion_main!(benches);
