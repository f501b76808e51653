use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use notionlab::challenger::GameConfig;
use notionlab::harness::{estimate_advantage, exhaustive_safety_with, Bounds, Exec};
use notionlab::hierarchy::graph;
use notionlab::notions;
use notionlab::props::Side;
use notionlab::protocols::LeakageFunction;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn estimation(c: &mut Criterion) {
    let w = graph().separations.iter().find(|w| w.label == "P1").expect("P1 exists").clone();
    let attack = w.attack(&Bounds::default()).expect("P1 has an attack");
    let x2 = notions::parse(&w.x2).unwrap();
    let mut group = c.benchmark_group("estimate_advantage");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 2000), &exec, |b, &exec| {
            b.iter(|| estimate_advantage(&x2, &w.protocol, &attack, 2000, 0, GameConfig::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let notion = notions::parse("S!O").unwrap();
    let leaks = [LeakageFunction::UserCount(Side::Receiver)];
    let bounds = Bounds { max_batch_len: 2, ..Bounds::default() };
    let mut group = c.benchmark_group("exhaustive_safety");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, "S!O"), &exec, |b, &exec| {
            b.iter(|| exhaustive_safety_with(&notion, &leaks, &bounds, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, estimation, oracle);
criterion_main!(benches);
