use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cmpr_core::data::augment::{augment, hflip, pad_crop, resize, AugmentConfig, Prepared};
use cmpr_core::data::io::{read_id_list, regdb_train_ids};
use cmpr_core::data::{
    default_sigma, export_synthetic, for_each_batch, load_dataset, make_heatmaps, synth_generate, to_heatmap_coords,
    BalancedIndex, BatchBuilder, Dataset, Keypoint, KeypointLayout, Layout, Modality, Sample, Standardization,
    SynthSpec, COMPACT, FULL_BODY,
};
use cmpr_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(ids: std::ops::Range<usize>, n: usize) -> SynthSpec {
    SynthSpec {
        identities: ids,
        images_per_modality: n,
        input_hw: (96, 48),
        keypoint_count: 8,
        seed: 42,
    }
}

fn builder(data: &Dataset) -> BatchBuilder {
    BatchBuilder {
        augment: AugmentConfig::for_input((96, 48)),
        layout: KeypointLayout::for_count(data.keypoint_count).unwrap(),
        stats: Standardization::from_dataset(data),
        class_map: data.class_map(),
        sigma: default_sigma(24),
        heatmap_stride: 4,
    }
}

#[test]
fn synthetic_export_round_trips() {
    let data = synth_generate(&spec(0..3, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_synthetic(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path(), Layout::Synthetic, 8).unwrap();
    assert_eq!(back, data);
    if let Ok(keep) = std::env::var("CMPR_KEEP_SYNTH") {
        export_synthetic(&data, Path::new(&keep)).unwrap();
    }
}

fn write_png(path: &Path, gray: bool) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    if gray {
        image::GrayImage::from_pixel(4, 8, image::Luma([90])).save(path).unwrap();
    } else {
        image::RgbImage::from_pixel(4, 8, image::Rgb([10, 20, 30])).save(path).unwrap();
    }
}

#[test]
fn sysu_layout_tags_infrared_cameras() {
    let dir = tempfile::tempdir().unwrap();
    for cam in 1..=6 {
        let ir = cam == 3 || cam == 6;
        write_png(&dir.path().join(format!("cam{cam}/0007/0001.png")), ir);
    }
    fs::create_dir_all(dir.path().join("exp")).unwrap();
    fs::write(dir.path().join("exp/test_id.txt"), "7,9\n").unwrap();
    let data = load_dataset(dir.path(), Layout::SysuLike, 16).unwrap();
    assert_eq!(data.len(), 6);
    for s in &data.samples {
        let expect = if [3, 6].contains(&s.camera) { Modality::Ir } else { Modality::Rgb };
        assert_eq!(s.modality, expect);
        assert_eq!(s.identity, 7);
        assert_eq!(s.image.shape(), &[3, 8, 4]);
    }
    let ir = data.samples.iter().find(|s| s.camera == 3).unwrap();
    assert!(ir.image.data().iter().all(|&v| v == 90.0 / 255.0));
    assert_eq!(read_id_list(&dir.path().join("exp/test_id.txt")).unwrap(), vec![7, 9]);

    fs::remove_dir_all(dir.path().join("cam5")).unwrap();
    match load_dataset(dir.path(), Layout::SysuLike, 16) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("cam5")),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn regdb_layout_and_trials() {
    let dir = tempfile::tempdir().unwrap();
    for id in [1, 2] {
        write_png(&dir.path().join(format!("visible/{id}/0.png")), false);
        write_png(&dir.path().join(format!("thermal/{id}/0.png")), true);
    }
    fs::create_dir_all(dir.path().join("splits")).unwrap();
    for t in 0..10 {
        if t != 4 {
            fs::write(dir.path().join(format!("splits/trial_{t}.txt")), "1\n").unwrap();
        }
    }
    assert!(matches!(load_dataset(dir.path(), Layout::RegdbLike, 16), Err(Error::Ingestion { .. })));
    fs::write(dir.path().join("splits/trial_4.txt"), "2\n").unwrap();
    let data = load_dataset(dir.path(), Layout::RegdbLike, 16).unwrap();
    assert_eq!(data.summary().per_modality[&Modality::Ir], 2);
    assert_eq!(regdb_train_ids(dir.path(), 4).unwrap(), vec![2]);
}

#[test]
fn malformed_manifest_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.tsv"), "path\tid\tmodality\tcamera\na.png\tx\trgb\t0\n").unwrap();
    match load_dataset(dir.path(), Layout::Synthetic, 8) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("manifest.tsv")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        load_dataset(&dir.path().join("nope"), Layout::Synthetic, 8),
        Err(Error::Ingestion { .. })
    ));
}

#[test]
fn heatmap_values() {
    let kp = [Keypoint { x: 3.0, y: 2.0, visible: true }, Keypoint { x: 1.0, y: 1.0, visible: false }];
    let h = make_heatmaps(Some(&kp), 2, (8, 8), 2.0);
    assert_eq!(h.data()[2 * 8 + 3], 1.0);
    let at_distance_two = h.data()[2 * 8 + 5];
    assert!((at_distance_two - (-0.5f32).exp()).abs() < 1e-7);
    assert!((at_distance_two - 0.6065).abs() < 1e-4);
    assert!(h.data()[64..].iter().all(|&v| v == 0.0));
    assert!(make_heatmaps(None, 3, (4, 4), 1.0).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn heatmap_peak_and_mass(x in 0.0f32..11.0, y in 0.0f32..23.0, sigma in 0.5f32..3.0) {
        let kp = [Keypoint { x, y, visible: true }];
        let h = make_heatmaps(Some(&kp), 1, (24, 12), sigma);
        let max = h.data().iter().cloned().fold(0.0f32, f32::max);
        let sum: f32 = h.data().iter().sum();
        prop_assert!(max <= 1.0);
        prop_assert!(sum <= 2.0 * std::f32::consts::PI * sigma * sigma + 1.0);
        let snapped = [Keypoint { x: x.round(), y: y.round(), visible: true }];
        let h = make_heatmaps(Some(&snapped), 1, (24, 12), sigma);
        let max = h.data().iter().cloned().fold(0.0f32, f32::max);
        prop_assert!((max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn flip_is_an_involution(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layout in [&FULL_BODY, &COMPACT] {
            let image = Tensor::from_fn(vec![3, 10, 6], |_| rng.random::<f32>());
            let kps = (0..layout.len())
                .map(|_| Keypoint {
                    x: rng.random_range(0..=80) as f32 / 16.0,
                    y: rng.random_range(0..=144) as f32 / 16.0,
                    visible: rng.random_bool(0.8),
                })
                .collect();
            let p = Prepared { image, keypoints: Some(kps) };
            let twice = hflip(&hflip(&p, layout), layout);
            prop_assert_eq!(twice, p);
        }
    }
}

#[test]
fn flip_swaps_left_and_right_channels() {
    let mut kps = vec![Keypoint { x: 10.0, y: 20.0, visible: true }; 16];
    kps[12] = Keypoint { x: 5.0, y: 30.0, visible: true };
    kps[13] = Keypoint { x: 40.0, y: 30.0, visible: true };
    let p = Prepared {
        image: Tensor::zeros(vec![3, 96, 48]),
        keypoints: Some(kps),
    };
    let f = hflip(&p, &FULL_BODY);
    let f_kps = f.keypoints.unwrap();
    assert_eq!((f_kps[13].x, f_kps[12].x), (42.0, 7.0));
    let maps = |k: &[Keypoint]| make_heatmaps(Some(&to_heatmap_coords(k, 4)), 16, (24, 12), 1.0);
    let before = maps(p.keypoints.as_ref().unwrap());
    let after = maps(&f_kps);
    let chan = |t: &Tensor<f32>, c: usize| t.data()[c * 288..(c + 1) * 288].to_vec();
    let mirror = |v: Vec<f32>| {
        let mut out = v.clone();
        for y in 0..24 {
            for x in 0..12 {
                out[y * 12 + x] = v[y * 12 + 11 - x];
            }
        }
        out
    };
    assert_eq!(chan(&after, 12), mirror(chan(&before, 13)));
    assert_eq!(chan(&after, 13), mirror(chan(&before, 12)));
}

#[test]
fn pad_crop_shifts_keypoints_and_hides_escapees() {
    let p = Prepared {
        image: Tensor::ones(vec![3, 6, 4]),
        keypoints: Some(vec![Keypoint { x: 0.0, y: 0.0, visible: true }, Keypoint { x: 3.0, y: 5.0, visible: true }]),
    };
    let c = pad_crop(&p, 2, 0, 4);
    let k = c.keypoints.unwrap();
    assert_eq!((k[0].x, k[0].y, k[0].visible), (-2.0, 2.0, false));
    assert_eq!((k[1].x, k[1].y, k[1].visible), (1.0, 7.0, false));
    let same = pad_crop(&p, 2, 2, 2);
    assert_eq!(same, p);
}

#[test]
fn eval_mode_is_deterministic_and_resizes() {
    let data = synth_generate(&spec(0..2, 1)).unwrap();
    let cfg = AugmentConfig::for_input((48, 24));
    let stats = Standardization::default();
    let s = &data.samples[0];
    let a = augment(s, false, &cfg, &COMPACT, &stats, &mut ChaCha8Rng::seed_from_u64(1));
    let b = augment(s, false, &cfg, &COMPACT, &stats, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(a, b);
    assert_eq!(a.image.shape(), &[3, 48, 24]);
    assert_eq!(AugmentConfig::for_input((288, 144)).pad, 10);
    let r = resize(&s.image, s.keypoints.as_deref(), (288, 144));
    assert_eq!(r.image.shape(), &[3, 288, 144]);
    let (k0, k1) = (&s.keypoints.as_ref().unwrap()[0], &r.keypoints.unwrap()[0]);
    assert!((k1.x - ((k0.x + 0.5) * 3.0 - 0.5)).abs() < 1e-4);
}

fn with_short_identity() -> Dataset {
    let mut data = synth_generate(&spec(0..10, 5)).unwrap();
    let mut seen = 0;
    data.samples.retain(|s| {
        if s.identity == 3 && s.modality == Modality::Ir {
            seen += 1;
            seen <= 2
        } else {
            true
        }
    });
    data
}

#[test]
fn thousand_batches_are_balanced() {
    let data = with_short_identity();
    let index = BalancedIndex::new(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let idx = index.sample(8, 4, &mut rng).unwrap();
        assert_eq!(idx.len(), 64);
        let ids: Vec<usize> = idx[..32].chunks(4).map(|c| data.samples[c[0]].identity).collect();
        assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 8);
        for (half, m) in [(&idx[..32], Modality::Rgb), (&idx[32..], Modality::Ir)] {
            for (chunk, id) in half.chunks(4).zip(&ids) {
                assert!(chunk.iter().all(|&i| data.samples[i].identity == *id && data.samples[i].modality == m));
                if *id != 3 || m == Modality::Rgb {
                    assert_eq!(chunk.iter().collect::<BTreeSet<_>>().len(), 4, "no repeats when enough images");
                }
            }
        }
    }
}

#[test]
fn short_identity_repeats_images() {
    let data = with_short_identity();
    let index = BalancedIndex::new(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let idx = index.sample(10, 4, &mut rng).unwrap();
    let ir3: Vec<_> = idx[40..].iter().filter(|&&i| data.samples[i].identity == 3).collect();
    assert_eq!(ir3.len(), 4);
    assert_eq!(ir3.iter().collect::<BTreeSet<_>>().len(), 2);
}

#[test]
fn smallest_batch_and_insufficient_data() {
    let data = synth_generate(&spec(0..2, 2)).unwrap();
    let index = BalancedIndex::new(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let idx = index.sample(1, 1, &mut rng).unwrap();
    assert_eq!(idx.len(), 2);
    assert_eq!(data.samples[idx[0]].identity, data.samples[idx[1]].identity);
    assert!(matches!(index.sample(3, 1, &mut rng), Err(Error::InsufficientData(_))));
    let rgb_only = Dataset::new(data.samples.iter().filter(|s| s.modality == Modality::Rgb).cloned().collect(), 8).unwrap();
    assert!(BalancedIndex::new(&rgb_only).eligible().is_empty());
}

#[test]
fn sampling_is_reproducible_and_worker_independent() {
    let data = synth_generate(&spec(0..6, 3)).unwrap();
    let index = BalancedIndex::new(&data);
    let b = builder(&data);
    let collect = |workers| {
        let mut out = Vec::new();
        for_each_batch(&data, &index, &b, 3, 2, 17, 1, 5, workers, |i, batch| {
            out.push((i, batch));
            Ok(())
        })
        .unwrap();
        out
    };
    let serial = collect(0);
    assert_eq!(serial.len(), 5);
    assert_eq!(serial, collect(1));
    assert_eq!(serial, collect(3));
    let batch = &serial[0].1;
    assert_eq!(batch.rgb.shape(), &[6, 3, 96, 48]);
    assert_eq!(batch.heatmaps.shape(), &[12, 8, 24, 12]);
    assert!(batch.heatmaps.data().iter().all(|&v| v <= 1.0));
    assert!(batch.labels.iter().all(|&l| l < 6));
    assert_eq!(&batch.modalities[..6], &[Modality::Rgb; 6]);
}

#[test]
fn dataset_rejects_mixed_sizes() {
    let s = |h| Sample {
        image: Tensor::zeros(vec![3, h, 4]),
        identity: 0,
        modality: Modality::Rgb,
        camera: 0,
        keypoints: None,
        path: "x.png".into(),
    };
    assert!(matches!(Dataset::new(vec![s(8), s(6)], 8), Err(Error::Ingestion { .. })));
}
