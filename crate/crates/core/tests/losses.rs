use cmpr_core::data::Modality;
use cmpr_core::losses::{
    cross_entropy_sum, hctri_from_features, hctri_loss, identity_loss, kd_loss, modality_centers, pose_loss,
    LossBreakdown,
};
use cmpr_core::substrate::gradient_check;
use cmpr_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Explicit enumeration over every (anchor, positive, negative) centre
/// triple; the hardest negative is the minimum over the enumerated list.
fn hctri_oracle(c: &[[Vec<f64>; 2]], rho: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for t in 0..a.len() {
            s += (a[t] - b[t]).powi(2);
        }
        s.sqrt()
    };
    let mut total = 0.0;
    for i in 0..c.len() {
        for m in 0..2 {
            let mut negatives = Vec::new();
            for (j, cj) in c.iter().enumerate() {
                if j != i {
                    negatives.push(dist(&c[i][m], &cj[0]));
                    negatives.push(dist(&c[i][m], &cj[1]));
                }
            }
            let hardest = negatives.iter().cloned().fold(f64::INFINITY, f64::min);
            total += (rho + dist(&c[i][m], &c[i][1 - m]) - hardest).max(0.0);
        }
    }
    total
}

fn to_nested(t: &Tensor<f64>) -> Vec<[Vec<f64>; 2]> {
    let (d, dim) = (t.dim(0), t.dim(2));
    (0..d)
        .map(|i| {
            let s = |m: usize| t.data()[(2 * i + m) * dim..(2 * i + m + 1) * dim].to_vec();
            [s(0), s(1)]
        })
        .collect()
}

fn batch_meta(d: usize, k: usize) -> (Vec<usize>, Vec<Modality>) {
    let mut labels = Vec::new();
    let mut mods = Vec::new();
    for m in Modality::BOTH {
        for i in 0..d {
            for _ in 0..k {
                labels.push(10 + 3 * i);
                mods.push(m);
            }
        }
    }
    (labels, mods)
}

#[test]
fn hctri_hand_case() {
    let c = Tensor::<f64>::new(vec![2, 2, 1], vec![0.0, 0.2, 0.3, 0.5]).unwrap();
    let v = hctri_loss(&c, 0.3).unwrap().value;
    assert!((v - 1.2).abs() < 1e-12, "{v}");
}

#[test]
fn hctri_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let d = rng.random_range(2..=4);
        let k = rng.random_range(1..=3);
        let dim = rng.random_range(1..=8);
        let (labels, mods) = batch_meta(d, k);
        let feats = rand_tensor(&mut rng, vec![2 * d * k, dim], 1.0);
        let (centers, _) = modality_centers(&feats, &labels, &mods, d, k).unwrap();
        let rho = rng.random_range(0.0..1.0);
        let got = hctri_loss(&centers, rho).unwrap().value;
        let via_feats = hctri_from_features(&feats, &labels, &mods, d, k, rho).unwrap().value;
        let want = hctri_oracle(&to_nested(&centers), rho);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        assert_eq!(got, via_feats);
    }
}

#[test]
fn hctri_margin_satisfied_gives_zero() {
    let c = Tensor::<f64>::new(vec![2, 2, 1], vec![0.0, 0.1, 5.0, 5.1]).unwrap();
    assert_eq!(hctri_loss(&c, 0.3).unwrap().value, 0.0);
}

#[test]
fn hctri_single_identity_is_zero() {
    let c = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 1.0, 3.0, 4.0]).unwrap();
    let e = hctri_loss(&c, 0.3).unwrap();
    assert_eq!(e.value, 0.0);
    assert_eq!(e.grads[0].max_abs(), 0.0);
}

#[test]
fn hctri_gradient_on_coincident_centres_is_zero_subgradient() {
    let c = Tensor::<f64>::new(vec![2, 2, 1], vec![0.0, 0.0, 0.1, 0.1]).unwrap();
    let e = hctri_loss(&c, 0.3).unwrap();
    assert!((e.value - 4.0 * 0.2).abs() < 1e-12);
    assert!(e.grads[0].all_finite());
}

#[test]
fn centres_are_group_means() {
    let (labels, mods) = batch_meta(1, 2);
    let f = Tensor::new(vec![4, 2], vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let (c, _) = modality_centers(&f, &labels, &mods, 1, 2).unwrap();
    assert_eq!(c.data(), &[1.0, 1.0, 1.0, 1.0]);
    let bad_mods = vec![Modality::Rgb; 4];
    assert!(matches!(
        modality_centers(&f, &labels, &bad_mods, 1, 2),
        Err(Error::InvalidBatch(_))
    ));
}

#[test]
fn pose_loss_values() {
    let h = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let z = Tensor::zeros(vec![1, 1, 2, 2]);
    assert_eq!(pose_loss(&h, &z).unwrap().value, 1.0);
    assert_eq!(pose_loss(&h, &h).unwrap().value, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, vec![3, 2, 4, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![3, 2, 4, 4], 1.0);
    let doubled = a.zip_map(&b, |x, y| x + 2.0 * (y - x)).unwrap();
    let base = pose_loss(&a, &b).unwrap().value;
    assert!((pose_loss(&a, &doubled).unwrap().value - 4.0 * base).abs() < 1e-10);
    let wrong = Tensor::zeros(vec![3, 2, 4, 3]);
    assert!(matches!(pose_loss(&a, &wrong), Err(Error::InvalidShape(_))));
}

#[test]
fn identity_loss_values() {
    let uniform = Tensor::<f64>::zeros(vec![1, 4]);
    let v = identity_loss(&[uniform.clone()], &[uniform.clone()], &[2]).unwrap().value;
    assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12);
    let confident = Tensor::new(vec![1, 4], vec![0.0, 0.0, 200.0, 0.0]).unwrap();
    assert!(identity_loss(&[confident.clone()], &[confident], &[2]).unwrap().value < 1e-80);
    assert!(matches!(
        identity_loss(&[uniform.clone()], &[], &[4]),
        Err(Error::InvalidLabel { label: 4, num_classes: 4 })
    ));
}

#[test]
fn identity_loss_shift_invariant_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let heads: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, vec![4, 6], 3.0)).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let base = identity_loss(&heads[..2], &heads[2..], &labels).unwrap().value;
        let mut shifted = heads.clone();
        shifted[1] = shifted[1].map(|v| v + 7.5);
        let s = identity_loss(&shifted[..2], &shifted[2..], &labels).unwrap().value;
        assert!((s - base).abs() < 1e-10);
        let mut bumped = heads.clone();
        let idx = 2 * 6 + labels[2];
        bumped[2].data_mut()[idx] += 0.5;
        let b = identity_loss(&bumped[..2], &bumped[2..], &labels).unwrap().value;
        assert!(b < base);
    }
}

#[test]
fn kd_values() {
    let teacher = Tensor::new(vec![1, 2], vec![0.0, -2000.0]).unwrap();
    let student = Tensor::zeros(vec![1, 2]);
    let v = kd_loss(&teacher, &[student.clone()], &[student]).unwrap().value;
    assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12, "{v}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_tensor(&mut rng, vec![3, 5], 4.0);
    let shifted = t.map(|x| x + 1.0);
    let e = kd_loss(&t, &[t.clone(), shifted], &[t.clone()]).unwrap();
    assert!(e.value.abs() < 1e-12);
    assert!(e.grads.iter().all(|g| g.max_abs() < 1e-12));
    let wrong = Tensor::zeros(vec![3, 4]);
    assert!(matches!(kd_loss(&t, &[wrong], &[]), Err(Error::InvalidShape(_))));
}

#[test]
fn kd_nonnegative_on_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let n = rng.random_range(2..8);
        let scale = rng.random_range(0.1..40.0);
        let t = rand_tensor(&mut rng, vec![1, n], scale);
        let s = rand_tensor(&mut rng, vec![1, n], scale);
        let v = kd_loss(&t, &[s], &[]).unwrap().value;
        assert!(v >= 0.0, "{v} {t:?}");
    }
}

#[test]
fn breakdown_total_is_weighted_sum() {
    let b = LossBreakdown::new(1.0, 2.0, 0.5, 0.25, 0.1, 5.0, 1.0);
    assert!((b.total - (1.0 + 0.2 + 2.5 + 0.25)).abs() < 1e-12);
    let off = LossBreakdown::new(1.0, 2.0, 0.5, 0.25, 0.1, 0.0, 0.0);
    assert_eq!(off.total, 1.0 + 0.1 * 2.0);
    assert_eq!(LossBreakdown::new(f64::NAN, 0.0, 0.0, 0.0, 0.1, 5.0, 1.0).first_non_finite().unwrap().0, "l_id");
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let h = rand_tensor(&mut rng, vec![2, 3, 4, 4], 1.0);
        let p = rand_tensor(&mut rng, vec![2, 3, 4, 4], 1.0);
        let f = |x: &[Tensor<f64>]| {
            let e = pose_loss(&h, &x[0])?;
            Ok((e.value, e.grads))
        };
        assert!(gradient_check(&f, &[p], 1e-5).unwrap() < 1e-6);

        let labels = vec![0, 3, 1];
        let heads: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, vec![3, 4], 2.0)).collect();
        let f = |x: &[Tensor<f64>]| {
            let e = identity_loss(&x[..2], &x[2..], &labels)?;
            Ok((e.value, e.grads))
        };
        assert!(gradient_check(&f, &heads, 1e-5).unwrap() < 1e-6);

        let t = rand_tensor(&mut rng, vec![3, 4], 2.0);
        let f = |x: &[Tensor<f64>]| {
            let e = kd_loss(&t, &x[..1], &x[1..])?;
            Ok((e.value, e.grads))
        };
        assert!(gradient_check(&f, &heads, 1e-5).unwrap() < 1e-6);

        let f = |x: &[Tensor<f64>]| {
            let (v, g) = cross_entropy_sum(&x[0], &labels)?;
            Ok((v, vec![g]))
        };
        assert!(gradient_check(&f, &heads[..1], 1e-5).unwrap() < 1e-6);
    }
}

proptest! {
    #[test]
    fn hctri_translation_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rand_tensor(&mut rng, vec![3, 2, 4], 1.0);
        let moved = c.map(|v| v + shift);
        let a = hctri_loss(&c, 0.3).unwrap().value;
        let b = hctri_loss(&moved, 0.3).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn losses_invariant_to_batch_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k) = (3, 2);
        let (labels, mods) = batch_meta(d, k);
        let n = labels.len();
        let feats = rand_tensor(&mut rng, vec![n, 5], 1.0);
        let logits = rand_tensor(&mut rng, vec![n, 4], 2.0);
        let teacher = rand_tensor(&mut rng, vec![n, 4], 2.0);
        let heat = rand_tensor(&mut rng, vec![n, 2, 3, 3], 1.0);
        let target = rand_tensor(&mut rng, vec![n, 2, 3, 3], 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pm: Vec<Modality> = perm.iter().map(|&i| mods[i]).collect();
        let cls: Vec<usize> = labels.iter().map(|l| l % 4).collect();
        let pcls: Vec<usize> = perm.iter().map(|&i| cls[i]).collect();

        let a = hctri_from_features(&feats, &labels, &mods, d, k, 0.3).unwrap().value;
        let b = hctri_from_features(&feats.select_rows(&perm), &pl, &pm, d, k, 0.3).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
        let a = identity_loss(&[logits.clone()], &[], &cls).unwrap().value;
        let b = identity_loss(&[logits.select_rows(&perm)], &[], &pcls).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
        let a = kd_loss(&teacher, &[logits.clone()], &[]).unwrap().value;
        let b = kd_loss(&teacher.select_rows(&perm), &[logits.select_rows(&perm)], &[]).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
        let a = pose_loss(&target, &heat).unwrap().value;
        let b = pose_loss(&target.select_rows(&perm), &heat.select_rows(&perm)).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }
}
