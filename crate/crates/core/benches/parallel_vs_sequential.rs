use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dystruct::denoiser::toy::{generate_corpus, CorpusShape, ToyConfig, ToyOracle};
use dystruct::harness::{run_benchmark, BenchConfig, MethodKind};
use dystruct::par::Parallelism;

fn corpus_run(c: &mut Criterion) {
    let items = generate_corpus(32, 7, &CorpusShape::default());
    let oracle = ToyOracle::from_corpus(&items, ToyConfig::default()).unwrap();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    let mut group = c.benchmark_group("corpus_run");
    group.sample_size(10);
    for (label, par) in [
        ("sequential", Parallelism::Sequential),
        ("parallel", Parallelism::Threads(threads)),
    ] {
        let config = BenchConfig {
            parallelism: par,
            ..BenchConfig::default()
        };
        group.bench_with_input(BenchmarkId::new(label, threads), &config, |b, config| {
            b.iter(|| {
                run_benchmark(
                    &oracle,
                    &items,
                    &[MethodKind::Dystruct, MethodKind::FixedLength],
                    &[0],
                    config,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, corpus_run);
criterion_main!(benches);
