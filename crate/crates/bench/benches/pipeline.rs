use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rahore_bench::{dataset, mock_engine};
use rahore_core::datasets::{generate_pairs, ExportFields, ExportKind, Exporter, PairSpec, Ratio};
use rahore_core::engine::EngineConfig;
use rahore_core::prompt::{render_for_query, PromptTemplate, RoleLabels};
use rahore_core::scoring::{relevance, Normalization};

fn prompts(c: &mut Criterion) {
    let ds = dataset(100);
    let (template, roles) = (PromptTemplate::default(), RoleLabels::default());
    let mut g = c.benchmark_group("render");
    g.throughput(Throughput::Elements(
        (ds.queries.len() * ds.corpus.len()) as u64,
    ));
    g.bench_function("100x8", |b| {
        b.iter(|| {
            for q in &ds.queries {
                for d in ds.corpus.iter() {
                    black_box(render_for_query(&template, &roles, d, q));
                }
            }
        })
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let grid: Vec<(f64, f64)> = (0..1000)
        .map(|i| (-(i % 37) as f64 * 0.7, -(i % 23) as f64 * 1.1))
        .collect();
    let mut g = c.benchmark_group("relevance");
    g.throughput(Throughput::Elements(grid.len() as u64));
    for norm in [Normalization::ProbSoftmax, Normalization::LiteralLogRatio] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{norm:?}")),
            &norm,
            |b, &n| {
                b.iter(|| {
                    grid.iter()
                        .map(|&(t, f)| relevance(t, f, n).s_rel)
                        .sum::<f64>()
                })
            },
        );
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let ds = dataset(20);
    let mut g = c.benchmark_group("retrieve_batch");
    g.throughput(Throughput::Elements(ds.queries.len() as u64));
    for warm in [false, true] {
        let engine = mock_engine(EngineConfig::default());
        if warm {
            rt.block_on(engine.warm_cache(&ds.corpus)).unwrap();
        }
        let name = if warm { "warm" } else { "cold" };
        g.bench_function(name, |b| {
            b.to_async(&rt).iter(|| async {
                black_box(
                    engine
                        .retrieve_batch(&ds.queries, &ds.corpus, 3)
                        .await
                        .unwrap(),
                )
            })
        });
    }
    g.finish();
}

fn export(c: &mut Criterion) {
    let ds = dataset(100);
    let (template, roles, fields) = (
        PromptTemplate::default(),
        RoleLabels::default(),
        ExportFields::default(),
    );
    let mut g = c.benchmark_group("export");
    for (name, ratio) in [("all", Ratio::OneToAll), ("1:3", Ratio::OneToN(3))] {
        g.bench_function(name, |b| {
            b.iter(|| {
                let pairs = generate_pairs(&ds, &PairSpec::new(ratio, 7));
                let exporter = Exporter {
                    template: &template,
                    roles: &roles,
                    kind: ExportKind::Sft,
                    fields: &fields,
                };
                let mut buf = Vec::with_capacity(1 << 20);
                black_box(exporter.write(&pairs, &mut buf).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, prompts, scoring, retrieval, export);
criterion_main!(benches);
