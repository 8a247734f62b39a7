use std::hint::black_box;

use cmpr_bench::uniform;
use cmpr_core::network::{ArchFlags, Model, Preset, ScaleConfig};
use cmpr_core::substrate::Mode;
use criterion::{criterion_group, criterion_main, Criterion};

fn tiny_forward(c: &mut Criterion) {
    let cfg = ScaleConfig::preset(Preset::Tiny, 20);
    let (h, w) = cfg.input_hw;
    let x = uniform(&[8, 3, h, w], 1);
    let mut group = c.benchmark_group("tiny forward, 8+8 images");
    group.sample_size(10);
    for (name, arch) in [("baseline", ArchFlags::BASELINE), ("full", ArchFlags::FULL)] {
        let mut model = Model::<f32>::new(cfg.clone(), arch, 0).unwrap();
        group.bench_function(format!("{name} eval"), |b| {
            b.iter(|| black_box(model.infer(Some(&x), Some(&x)).unwrap()))
        });
        group.bench_function(format!("{name} train"), |b| {
            b.iter(|| black_box(model.full_forward(&x, &x, Mode::Train).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, tiny_forward);
criterion_main!(benches);
