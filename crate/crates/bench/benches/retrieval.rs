use std::hint::black_box;

use cmpr_bench::{uniform, uniform_f64};
use cmpr_core::eval::{cmc_map, distance_matrix, l2_normalize_rows, DistanceMetric, ExclusionRule, RowMeta, MAX_RANK};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn meta(n: usize, ids: usize, camera: usize) -> Vec<RowMeta> {
    (0..n).map(|i| RowMeta { identity: i % ids, camera: camera + i % 2 }).collect()
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieval");
    for (nq, ng) in [(200, 400), (1000, 2000)] {
        let dist = uniform_f64(&[nq, ng], 7);
        let (qm, gm) = (meta(nq, 100, 2), meta(ng, 100, 0));
        let rule = ExclusionRule { extra_camera_pairs: Vec::new() };
        group.bench_with_input(BenchmarkId::new("cmc_map", format!("{nq}x{ng}")), &dist, |b, d| {
            b.iter(|| black_box(cmc_map(d, &qm, &gm, &rule, MAX_RANK).unwrap()))
        });
    }
    let mut q = uniform(&[200, 3072], 8);
    let mut g = uniform(&[400, 3072], 9);
    l2_normalize_rows(&mut q);
    l2_normalize_rows(&mut g);
    group.bench_function("cosine distances 200x400x3072", |b| {
        b.iter(|| black_box(distance_matrix(&q, &g, DistanceMetric::Cosine).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, retrieval);
criterion_main!(benches);
