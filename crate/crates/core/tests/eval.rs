use cmpr_core::data::{synth_generate, Standardization, SynthSpec};
use cmpr_core::eval::{
    cmc_map, distance_matrix, extract_features, l2_normalize_rows, run_protocol, write_results_csv, DistanceMetric,
    EvalPrep, ExclusionRule, FeatureSet, ProtocolKind, RankingResult, ResultRow, RetrievalProtocol, RowMeta,
    RESULTS_HEADER,
};
use cmpr_core::network::{ArchFlags, Model, Preset, ScaleConfig};
use cmpr_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position-counting oracle: the rank of a valid gallery item is the number
/// of valid items ordered strictly before it by (distance, index).
fn oracle(d: &Tensor<f64>, q: &[RowMeta], g: &[RowMeta], rule: &ExclusionRule, max_rank: usize) -> Option<(Vec<f64>, f64)> {
    let mut cmc = vec![0.0; max_rank];
    let mut aps = Vec::new();
    for (qi, &qm) in q.iter().enumerate() {
        let row = d.row(qi);
        let valid: Vec<usize> = (0..g.len()).filter(|&j| !rule.excludes(qm, g[j])).collect();
        let before = |a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
        let position = |j: usize| valid.iter().filter(|&&o| o != j && before(o, j)).count() + 1;
        let rel: Vec<usize> = valid.iter().copied().filter(|&j| g[j].identity == qm.identity).collect();
        if rel.is_empty() {
            continue;
        }
        let mut points: Vec<(usize, f64)> = rel
            .iter()
            .map(|&j| {
                let p = position(j);
                let hits_upto = rel.iter().filter(|&&o| position(o) <= p).count();
                (p, hits_upto as f64 / p as f64)
            })
            .collect();
        points.sort_by_key(|x| x.0);
        aps.push(points.iter().map(|x| x.1).sum::<f64>() / rel.len() as f64);
        let best = points[0].0;
        for r in 1..=max_rank {
            if best <= r {
                cmc[r - 1] += 1.0;
            }
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some((cmc.into_iter().map(|c| c / n).collect(), aps.iter().sum::<f64>() / n))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Vec<RowMeta>, Vec<RowMeta>, ExclusionRule) {
    let nq = rng.random_range(1..=10);
    let ng = rng.random_range(1..=50);
    let ids = rng.random_range(1..=6);
    let cams = rng.random_range(1..=4);
    let m = |rng: &mut ChaCha8Rng| RowMeta {
        identity: rng.random_range(0..ids),
        camera: rng.random_range(0..cams),
    };
    let q: Vec<_> = (0..nq).map(|_| m(rng)).collect();
    let g: Vec<_> = (0..ng).map(|_| m(rng)).collect();
    let levels = rng.random_range(2..40);
    let d = Tensor::from_fn(vec![nq, ng], |_| rng.random_range(0..levels) as f64 / levels as f64);
    let rule = if rng.random_bool(0.3) {
        ExclusionRule {
            extra_camera_pairs: vec![(0, 1)],
        }
    } else {
        ExclusionRule::default()
    };
    (d, q, g, rule)
}

#[test]
fn matches_position_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 100 {
        let (d, q, g, rule) = random_instance(&mut rng);
        match (cmc_map(&d, &q, &g, &rule, 20), oracle(&d, &q, &g, &rule, 20)) {
            (Ok(r), Some((cmc, map))) => {
                assert!((r.map - map).abs() <= 1e-9);
                for (a, b) in r.cmc.iter().zip(&cmc) {
                    assert!((a - b).abs() <= 1e-9);
                }
                assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                assert!(r.cmc.iter().chain(&r.per_query_ap).all(|&v| (0.0..=1.0).contains(&v)));
                let mean = r.per_query_ap.iter().sum::<f64>() / r.per_query_ap.len() as f64;
                assert!((mean - r.map).abs() < 1e-12);
                assert_eq!(r.num_queries_evaluated + r.num_queries_skipped, q.len());
                checked += 1;
            }
            (Err(Error::EmptyProtocol), None) => {}
            (a, b) => panic!("implementation {a:?} vs oracle {b:?}"),
        }
    }
}

#[test]
fn monotone_transform_keeps_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let (d, q, g, rule) = random_instance(&mut rng);
        let t = d.map(|v| (3.0 * v).exp() - 7.0);
        if let (Ok(a), Ok(b)) = (cmc_map(&d, &q, &g, &rule, 20), cmc_map(&t, &q, &g, &rule, 20)) {
            assert_eq!(a, b);
        }
    }
}

fn meta(id: usize, cam: usize) -> RowMeta {
    RowMeta { identity: id, camera: cam }
}

#[test]
fn relevance_one_zero_one() {
    let d = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
    let r = cmc_map(&d, &[meta(1, 0)], &[meta(1, 1), meta(2, 1), meta(1, 2)], &ExclusionRule::default(), 20).unwrap();
    assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.map - 0.8333).abs() < 1e-4);
    assert_eq!(r.rank(1), 1.0);
}

#[test]
fn perfect_retrieval_and_exclusion() {
    let d = Tensor::new(vec![2, 3], vec![0.0, 0.5, 0.9, 0.4, 0.1, 0.2]).unwrap();
    let q = [meta(1, 0), meta(2, 3)];
    let g = [meta(1, 1), meta(2, 1), meta(3, 1)];
    let r = cmc_map(&d, &q, &g, &ExclusionRule::default(), 20).unwrap();
    assert_eq!(r.map, 1.0);

    let q = [meta(1, 0), meta(2, 1)];
    let r = cmc_map(&d, &q, &g, &ExclusionRule::default(), 20).unwrap();
    assert_eq!(r.num_queries_evaluated, 1);
    assert_eq!(r.num_queries_skipped, 1);

    let rule = ExclusionRule {
        extra_camera_pairs: vec![(0, 1)],
    };
    let only = cmc_map(&d.select_rows(&[0]), &q[..1], &g, &rule, 20);
    assert!(matches!(only, Err(Error::EmptyProtocol)));
}

#[test]
fn distances() {
    let mut q = Tensor::new(vec![3, 2], vec![3.0, 4.0, 0.0, 2.0, -1.0, 0.0]).unwrap();
    l2_normalize_rows(&mut q);
    for r in 0..3 {
        let n: f32 = q.row(r).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let d = distance_matrix(&g, &g, DistanceMetric::Cosine).unwrap();
    assert_eq!(d.data(), &[0.0, 1.0, 1.0, 0.0]);
    let anti = Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap();
    assert_eq!(distance_matrix(&g, &anti, DistanceMetric::Cosine).unwrap().data(), &[2.0, 1.0]);
    let e = distance_matrix(&g, &anti, DistanceMetric::Euclidean).unwrap();
    assert!((e.data()[0] - 2.0).abs() < 1e-12);
    let wrong = Tensor::zeros(vec![1, 3]);
    assert!(matches!(distance_matrix(&g, &wrong, DistanceMetric::Cosine), Err(Error::InvalidShape(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::from_fn(vec![7, 33], |_| rng.random_range(-1.0f32..1.0));
    let b = Tensor::from_fn(vec![11, 33], |_| rng.random_range(-1.0f32..1.0));
    let full = distance_matrix(&a, &b, DistanceMetric::Cosine).unwrap();
    for i in 0..7 {
        let part = distance_matrix(&a.select_rows(&[i]), &b, DistanceMetric::Cosine).unwrap();
        assert_eq!(part.data(), full.row(i));
    }
}

#[test]
fn aggregation_and_csv() {
    let a = RankingResult {
        cmc: vec![0.5, 1.0],
        map: 0.6,
        per_query_ap: vec![0.6],
        num_queries_evaluated: 1,
        num_queries_skipped: 0,
    };
    let b = RankingResult {
        cmc: vec![1.0, 1.0],
        map: 1.0,
        per_query_ap: vec![1.0],
        num_queries_evaluated: 1,
        num_queries_skipped: 2,
    };
    let m = RankingResult::mean(&[a, b]).unwrap();
    assert_eq!(m.cmc, vec![0.75, 1.0]);
    assert!((m.map - 0.8).abs() < 1e-12);
    assert_eq!(m.num_queries_skipped, 2);
    assert_eq!(m.rank(20), 1.0);
    assert!(matches!(RankingResult::mean(&[]), Err(Error::EmptyProtocol)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    let row = ResultRow {
        protocol: "synthetic".into(),
        feature_set: FeatureSet::All,
        result: m,
        repetitions: 1,
        seed: 7,
    };
    write_results_csv(&path, &[row]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), RESULTS_HEADER);
    assert_eq!(lines.next().unwrap(), "synthetic,f_ALL,0.750000,1.000000,1.000000,0.800000,1,7");
}

#[test]
fn descriptors_are_unit_rows_of_the_right_width() {
    let data = synth_generate(&SynthSpec {
        identities: 0..3,
        images_per_modality: 2,
        input_hw: (96, 48),
        keypoint_count: 8,
        seed: 5,
    })
    .unwrap();
    let cfg = ScaleConfig::preset(Preset::Tiny, 3);
    let model = Model::<f32>::new(cfg.clone(), ArchFlags::FULL, 1).unwrap();
    let prep = EvalPrep {
        input_hw: cfg.input_hw,
        stats: Standardization::from_dataset(&data),
        batch_size: 4,
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let per_bank = cfg.stripe_count * cfg.fc_dim;
    for (which, dim) in [(FeatureSet::Id, per_bank), (FeatureSet::Pose, per_bank), (FeatureSet::All, 2 * per_bank)] {
        let f = extract_features(&model, &data, &idx, &prep, which).unwrap();
        assert_eq!(f.shape(), &[data.len(), dim]);
        for r in 0..data.len() {
            let n: f32 = f.row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }
    let all = extract_features(&model, &data, &idx, &prep, FeatureSet::All).unwrap();
    let id = extract_features(&model, &data, &idx, &prep, FeatureSet::Id).unwrap();
    let single = extract_features(&model, &data, &idx[3..4], &prep, FeatureSet::Id).unwrap();
    for (a, b) in single.row(0).iter().zip(id.row(3)) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(all.shape()[1], 2 * id.shape()[1]);

    let baseline = Model::<f32>::new(cfg, ArchFlags::BASELINE, 1).unwrap();
    assert!(matches!(
        extract_features(&baseline, &data, &idx, &prep, FeatureSet::All),
        Err(Error::InvalidConfig(_))
    ));

    let mut sysu = RetrievalProtocol::new(ProtocolKind::SysuAll);
    sysu.repetitions = 1;
    let a = run_protocol(&model, &data, &sysu, &prep, FeatureSet::All, None, 9).unwrap();
    let b = run_protocol(&model, &data, &sysu, &prep, FeatureSet::All, None, 9).unwrap();
    assert_eq!(a, b);
    let syn = RetrievalProtocol::new(ProtocolKind::Synthetic);
    let r = run_protocol(&model, &data, &syn, &prep, FeatureSet::Id, None, 0).unwrap();
    assert_eq!(r.num_queries_evaluated, 6);
    let regdb = RetrievalProtocol::new(ProtocolKind::RegdbV2t);
    assert!(run_protocol(&model, &data, &regdb, &prep, FeatureSet::Id, None, 0).is_err());
    let trials = vec![vec![0, 1], vec![1, 2]];
    let r = run_protocol(&model, &data, &regdb, &prep, FeatureSet::Id, Some(&trials), 0).unwrap();
    assert_eq!(r.num_queries_evaluated, 8);
}
