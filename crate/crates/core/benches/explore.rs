use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use noticekv::cost_model::{hit_ratio_sweep, Granularity};
use noticekv::harness::{scenarios, Explorer};
use noticekv::workload::{trace, KeyDist};

fn exhaustive(c: &mut Criterion) {
    let mut group = c.benchmark_group("exhaustive");
    group.sample_size(10);
    for name in ["split_vs_get_upper", "merge_vs_get_left", "upsert_race"] {
        let scn = scenarios::find(name).expect("shipped scenario");
        for parallel in [false, true] {
            let ex = Explorer {
                parallel,
                ..Explorer::default()
            };
            let id = BenchmarkId::new(if parallel { "parallel" } else { "sequential" }, name);
            group.bench_with_input(id, &scn, |b, scn| {
                b.iter(|| ex.explore_exhaustive(scn).expect("within bound"))
            });
        }
    }
    group.finish();
}

fn random(c: &mut Criterion) {
    let mut group = c.benchmark_group("random_1000");
    group.sample_size(10);
    let scn = scenarios::find("split_vs_upsert_upper").expect("shipped scenario");
    for parallel in [false, true] {
        let ex = Explorer {
            parallel,
            ..Explorer::default()
        };
        group.bench_function(if parallel { "parallel" } else { "sequential" }, |b| {
            b.iter(|| ex.explore_random(&scn, 1_000, 3).expect("runs"))
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let t = trace(20_000, KeyDist::Zipf(0.99), 200_000, 5).expect("trace");
    let budgets: Vec<u64> = (0..8).map(|i| 20_000u64 << i).collect();
    let grans = [
        Granularity::Record { bytes: 100 },
        Granularity::Page {
            bytes: 1_000,
            records_per_page: 10,
        },
    ];
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let mut group = c.benchmark_group("hit_ratio_sweep");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| single.install(|| hit_ratio_sweep(&t, &budgets, &grans).expect("valid")))
    });
    group.bench_function("parallel", |b| {
        b.iter(|| hit_ratio_sweep(&t, &budgets, &grans).expect("valid"))
    });
    group.finish();
}

criterion_group!(benches, exhaustive, random, sweep);
criterion_main!(benches);
