//! Finite-difference verification suite over the differentiable primitives
//! and the four loss terms, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Modality;
use crate::error::Result;
use crate::losses::{hctri_from_features, identity_loss, kd_loss, modality_centers, pose_loss};
use crate::substrate::{gradient_check, graph_fn, Graph, Mode, Tensor, Var};

/// Largest accepted `|analytic - numeric| / max(1, |numeric|)`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= GRADCHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts `v` with a fixed random tensor so every output coordinate gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(v).to_vec(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn run(name: &'static str, seeds: u64, mut trial: impl FnMut(u64) -> Result<f64>) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        worst = worst.max(trial(s)?);
    }
    Ok(CheckOutcome {
        name,
        trials: seeds as usize,
        worst,
    })
}

fn balanced_meta(d: usize, k: usize) -> (Vec<usize>, Vec<Modality>) {
    let mut labels = Vec::with_capacity(2 * d * k);
    let mut mods = Vec::with_capacity(2 * d * k);
    for m in Modality::BOTH {
        for i in 0..d {
            labels.extend(std::iter::repeat_n(i, k));
            mods.extend(std::iter::repeat_n(m, k));
        }
    }
    (labels, mods)
}

/// True when every hinge, distance and nearest-negative choice is at least
/// `gap` away from a kink.
fn hctri_is_smooth(centers: &Tensor<f64>, rho: f64, gap: f64) -> bool {
    let (d, dim) = (centers.dim(0), centers.dim(2));
    let c = centers.data();
    let at = |s: usize| &c[s * dim..(s + 1) * dim];
    let dist = |a: usize, b: usize| at(a).iter().zip(at(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    for i in 0..d {
        for m in 0..2 {
            let pos = dist(2 * i + m, 2 * i + 1 - m);
            let mut negs: Vec<f64> = (0..2 * d).filter(|s| s / 2 != i).map(|s| dist(2 * i + m, s)).collect();
            negs.sort_by(f64::total_cmp);
            if pos < gap || negs[0] < gap || negs[1] - negs[0] < gap || (rho + pos - negs[0]).abs() < gap {
                return false;
            }
        }
    }
    true
}

/// Checks of the four loss terms, `seeds` random instances each.
pub fn loss_checks(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let pose = run("pose_loss", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let target = uniform(&mut rng, vec![2, 3, 4, 4], 0.0, 1.0);
        let pred = uniform(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0);
        let f = |x: &[Tensor<f64>]| {
            let e = pose_loss(&target, &x[0])?;
            Ok((e.value, e.grads))
        };
        gradient_check(&f, &[pred], STEP)
    })?;
    let identity = run("identity_loss", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let heads: Vec<_> = (0..4).map(|_| uniform(&mut rng, vec![4, 5], -3.0, 3.0)).collect();
        let f = |x: &[Tensor<f64>]| {
            let e = identity_loss(&x[..2], &x[2..], &labels)?;
            Ok((e.value, e.grads))
        };
        gradient_check(&f, &heads, STEP)
    })?;
    let hctri = run("hctri_loss", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (d, k, dim, rho) = (3, 2, 4, 0.3);
        let (labels, mods) = balanced_meta(d, k);
        let feats = loop {
            let f = uniform(&mut rng, vec![2 * d * k, dim], -1.0, 1.0);
            let (c, _) = modality_centers(&f, &labels, &mods, d, k)?;
            if hctri_is_smooth(&c, rho, 1e-3) {
                break f;
            }
        };
        let f = |x: &[Tensor<f64>]| {
            let e = hctri_from_features(&x[0], &labels, &mods, d, k, rho)?;
            Ok((e.value, e.grads))
        };
        gradient_check(&f, &[feats], STEP)
    })?;
    let kd = run("kd_loss", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let teacher = uniform(&mut rng, vec![3, 6], -4.0, 4.0);
        let heads: Vec<_> = (0..4).map(|_| uniform(&mut rng, vec![3, 6], -4.0, 4.0)).collect();
        let f = |x: &[Tensor<f64>]| {
            let e = kd_loss(&teacher, &x[..2], &x[2..])?;
            Ok((e.value, e.grads))
        };
        gradient_check(&f, &heads, STEP)
    })?;
    Ok(vec![pose, identity, hctri, kd])
}

/// Checks of every differentiable graph primitive.
pub fn primitive_checks(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    out.push(run("conv2d", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (stride, pad) = (1 + (s % 2) as usize, (s % 3) as usize);
        let x = uniform(&mut rng, vec![2, 2, 5, 6], -1.0, 1.0);
        let w = uniform(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, vec![3], -1.0, 1.0);
        let f = graph_fn(Mode::Train, move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x, w, b], STEP)
    })?);
    out.push(run("conv_transpose2d", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, vec![2, 3, 3, 4], -1.0, 1.0);
        let w = uniform(&mut rng, vec![3, 2, 4, 4], -1.0, 1.0);
        let b = uniform(&mut rng, vec![2], -1.0, 1.0);
        let f = graph_fn(Mode::Train, move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x, w, b], STEP)
    })?);
    out.push(run("batch_norm", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, vec![3, 2, 3, 3], -2.0, 2.0);
        let gamma = uniform(&mut rng, vec![2], 0.5, 1.5);
        let beta = uniform(&mut rng, vec![2], -0.5, 0.5);
        let f = graph_fn(Mode::Train, move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x, gamma, beta], STEP)
    })?);
    out.push(run("batch_norm_2d", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, vec![5, 3], -2.0, 2.0);
        let gamma = uniform(&mut rng, vec![3], 0.5, 1.5);
        let beta = uniform(&mut rng, vec![3], -0.5, 0.5);
        let f = graph_fn(Mode::Train, move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x, gamma, beta], STEP)
    })?);
    out.push(run("normalize_rows", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = away_from_zero(&mut rng, vec![3, 4]);
        let f = graph_fn(Mode::Train, move |g, v| {
            let y = g.normalize_rows(v[0])?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x], STEP)
    })?);
    out.push(run("relu", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = away_from_zero(&mut rng, vec![4, 5]);
        let f = graph_fn(Mode::Train, move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, s)
        });
        gradient_check(&*f, &[x], STEP)
    })?);
    out.push(run("sigmoid", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, vec![4, 5], -4.0, 4.0);
        let f = graph_fn(Mode::Train, |g, v| {
            let y = g.sigmoid(v[0]);
            Ok(g.sum(y))
        });
        gradient_check(&*f, &[x], STEP)
    })?);
    out.push(run("mul_scale_add", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a = uniform(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let b = uniform(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let f = graph_fn(Mode::Train, move |g, v| {
            let p = g.mul(v[0], v[1])?;
            let q = g.scale(v[0], 0.7);
            let y = g.add(p, q)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[a, b], STEP)
    })?);
    out.push(run("gap_slice", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, vec![2, 3, 5, 2], -1.0, 1.0);
        let f = graph_fn(Mode::Train, move |g, v| {
            let band = g.slice_rows(v[0], 1, 4)?;
            let y = g.gap(band)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x], STEP)
    })?);
    out.push(run("linear_log_softmax", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, vec![3, 4], -1.0, 1.0);
        let w = uniform(&mut rng, vec![5, 4], -1.0, 1.0);
        let b = uniform(&mut rng, vec![5], -1.0, 1.0);
        let f = graph_fn(Mode::Train, move |g, v| {
            let z = g.linear(v[0], v[1], Some(v[2]))?;
            let y = g.log_softmax(z)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[x, w, b], STEP)
    })?);
    out.push(run("concat", seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a = uniform(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let b = uniform(&mut rng, vec![2, 1, 2, 2], -1.0, 1.0);
        let c = uniform(&mut rng, vec![1, 4, 2, 2], -1.0, 1.0);
        let f = graph_fn(Mode::Train, move |g, v| {
            let ch = g.concat(&[v[0], v[1]], 1)?;
            let y = g.concat(&[ch, v[2]], 0)?;
            project(g, y, s)
        });
        gradient_check(&*f, &[a, b, c], STEP)
    })?);
    Ok(out)
}

/// Primitive and loss checks together.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut all = primitive_checks(seeds)?;
    all.extend(loss_checks(seeds)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for outcome in run_suite(3).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn smoothness_filter_rejects_ties() {
        let c = Tensor::new(vec![3, 2, 1], vec![0.0, 0.5, 1.0, 2.0, -1.0, 3.0]).unwrap();
        assert!(!hctri_is_smooth(&c, 0.3, 1e-3));
    }
}
