use std::hint::black_box;

use cmpr_bench::uniform;
use cmpr_core::data::Modality;
use cmpr_core::losses::{hctri_from_features, kd_loss, pose_loss};
use criterion::{criterion_group, criterion_main, Criterion};

// one paper-sized batch: 8 identities, 4 images per modality
const D: usize = 8;
const K: usize = 4;
const M: usize = 2 * D * K;

fn losses(c: &mut Criterion) {
    let labels: Vec<usize> = (0..M).map(|i| (i % (D * K)) / K).collect();
    let modalities: Vec<Modality> = (0..M).map(|i| if i < D * K { Modality::Rgb } else { Modality::Ir }).collect();
    let feats = uniform(&[M, 512], 2);
    c.bench_function("hctri 64x512", |b| {
        b.iter(|| black_box(hctri_from_features(&feats, &labels, &modalities, D, K, 0.3).unwrap()))
    });

    let teacher = uniform(&[M, 395], 3);
    let heads: Vec<_> = (0..6).map(|i| uniform(&[M, 395], 10 + i)).collect();
    c.bench_function("kd 12 heads x 395 classes", |b| {
        b.iter(|| black_box(kd_loss(&teacher, &heads, &heads).unwrap()))
    });

    let target = uniform(&[M, 16, 72, 36], 4);
    let pred = uniform(&[M, 16, 72, 36], 5);
    c.bench_function("pose 64x16x72x36", |b| b.iter(|| black_box(pose_loss(&target, &pred).unwrap())));
}

criterion_group!(benches, losses);
criterion_main!(benches);
