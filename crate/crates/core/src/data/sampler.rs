use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentConfig};
use super::heatmap::{make_heatmaps, to_heatmap_coords};
use super::keypoints::KeypointLayout;
use super::{Dataset, MiniBatch, Modality, Standardization};
use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// Sample indices grouped by identity and modality.
#[derive(Clone, Debug)]
pub struct BalancedIndex {
    groups: BTreeMap<usize, [Vec<usize>; 2]>,
    eligible: Vec<usize>,
}

impl BalancedIndex {
    pub fn new(data: &Dataset) -> Self {
        let mut groups: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, s) in data.samples.iter().enumerate() {
            groups.entry(s.identity).or_default()[s.modality.index()].push(i);
        }
        let eligible = groups
            .iter()
            .filter(|(_, g)| !g[0].is_empty() && !g[1].is_empty())
            .map(|(&id, _)| id)
            .collect();
        BalancedIndex { groups, eligible }
    }

    /// Identities with at least one image in each modality.
    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    /// `2DK` dataset indices ordered `[RGB of id_1..id_D | IR of id_1..id_D]`,
    /// `K` per identity and modality.
    pub fn sample<R: Rng>(&self, d: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!("D={d} and K={k} must be positive")));
        }
        if self.eligible.len() < d {
            return Err(Error::InsufficientData(format!(
                "{} identities have both modalities, batch needs {d}",
                self.eligible.len()
            )));
        }
        let ids: Vec<usize> = self.eligible.choose_multiple(rng, d).copied().collect();
        let mut out = Vec::with_capacity(2 * d * k);
        for m in Modality::BOTH {
            for id in &ids {
                let pool = &self.groups[id][m.index()];
                if pool.len() >= k {
                    out.extend(pool.choose_multiple(rng, k).copied());
                } else {
                    let mut all = pool.clone();
                    all.shuffle(rng);
                    while all.len() < k {
                        all.push(*pool.choose(rng).unwrap());
                    }
                    out.extend(all);
                }
            }
        }
        Ok(out)
    }
}

/// Turns sampled indices into augmented, standardized tensors with heatmaps.
#[derive(Clone, Debug)]
pub struct BatchBuilder {
    pub augment: AugmentConfig,
    pub layout: &'static KeypointLayout,
    pub stats: Standardization,
    pub class_map: BTreeMap<usize, usize>,
    pub sigma: f32,
    pub heatmap_stride: usize,
}

impl BatchBuilder {
    pub fn assemble<R: Rng>(&self, data: &Dataset, indices: &[usize], d: usize, k: usize, rng: &mut R) -> Result<MiniBatch<f32>> {
        let (h, w) = self.augment.input_hw;
        let hm_hw = (h / self.heatmap_stride, w / self.heatmap_stride);
        let n = indices.len();
        let half = n / 2;
        let mut images = Vec::with_capacity(n);
        let mut heatmaps = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut modalities = Vec::with_capacity(n);
        for &i in indices {
            let s = &data.samples[i];
            let p = augment(s, true, &self.augment, self.layout, &self.stats, rng);
            let kps = p.keypoints.as_ref().map(|k| to_heatmap_coords(k, self.heatmap_stride));
            heatmaps.push(make_heatmaps(kps.as_deref(), data.keypoint_count, hm_hw, self.sigma));
            images.push(p.image);
            labels.push(*self.class_map.get(&s.identity).ok_or_else(|| {
                Error::InvalidBatch(format!("identity {} has no training class", s.identity))
            })?);
            modalities.push(s.modality);
        }
        let stack = |ts: &[Tensor<f32>]| -> Result<Tensor<f32>> {
            let mut shape = vec![ts.len()];
            shape.extend_from_slice(ts[0].shape());
            Tensor::new(shape, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
        };
        Ok(MiniBatch {
            rgb: stack(&images[..half])?,
            ir: stack(&images[half..])?,
            labels,
            modalities,
            heatmaps: stack(&heatmaps)?,
            indices: indices.to_vec(),
            d,
            k,
        })
    }
}

/// Draws `D` identities and `K` images per modality each, then assembles the
/// batch. Deterministic given the generator state.
pub fn sample_minibatch<R: Rng>(
    data: &Dataset,
    index: &BalancedIndex,
    builder: &BatchBuilder,
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<MiniBatch<f32>> {
    let indices = index.sample(d, k, rng)?;
    builder.assemble(data, &indices, d, k, rng)
}

/// Generator for batch `iter` of `epoch`; independent of how batches are
/// scheduled across workers.
pub fn batch_rng(seed: u64, epoch: usize, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | iter as u64);
    rng
}

/// Produces the `iters` batches of one epoch in order and hands each to
/// `consume`. With `workers == 0` everything runs on the calling thread;
/// otherwise `workers` threads prepare batches ahead and the consumer still
/// sees the single-threaded sequence.
#[allow(clippy::too_many_arguments)]
pub fn for_each_batch(
    data: &Dataset,
    index: &BalancedIndex,
    builder: &BatchBuilder,
    d: usize,
    k: usize,
    seed: u64,
    epoch: usize,
    iters: usize,
    workers: usize,
    mut consume: impl FnMut(usize, MiniBatch<f32>) -> Result<()>,
) -> Result<()> {
    let make = |iter: usize| {
        let mut rng = batch_rng(seed, epoch, iter);
        sample_minibatch(data, index, builder, d, k, &mut rng)
    };
    if workers == 0 {
        for iter in 0..iters {
            consume(iter, make(iter)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Result<MiniBatch<f32>>)>(2 * workers);
        for w in 0..workers {
            let tx = tx.clone();
            let make = &make;
            scope.spawn(move || {
                for iter in (w..iters).step_by(workers) {
                    if tx.send((iter, make(iter))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        let mut pending: HashMap<usize, Result<MiniBatch<f32>>> = HashMap::new();
        let mut next = 0;
        for (iter, batch) in rx.iter() {
            pending.insert(iter, batch);
            while let Some(b) = pending.remove(&next) {
                consume(next, b?)?;
                next += 1;
            }
        }
        Ok(())
    })
}
