//! Batched inference latency across window sizes, mirroring the CLI `bench`
//! command with criterion's statistics on top.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use patchtrad::detect::score_windows;
use patchtrad_bench::{bench_model, bench_windows};

fn batched_scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_windows");
    group.sample_size(20);
    for window_w in [32usize, 100] {
        let batch = 128usize;
        let modalities = 3usize;
        let state = bench_model(window_w, modalities);
        let windows = bench_windows(window_w, modalities, batch);
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("w{window_w}_b{batch}")),
            &windows,
            |b, windows| {
                b.iter(|| score_windows(&state, black_box(windows)).expect("scoring succeeds"));
            },
        );
    }
    group.finish();
}

criterion_group!(benches, batched_scoring);
criterion_main!(benches);
