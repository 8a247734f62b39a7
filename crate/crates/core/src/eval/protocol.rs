use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{cmc_map, distance_matrix, l2_normalize_rows, DistanceMetric, ExclusionRule, RankingResult, RowMeta, MAX_RANK};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::{Dataset, Modality, Standardization, COMPACT};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::substrate::Tensor;

/// Which stripe features form the retrieval descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSet {
    Id,
    Pose,
    All,
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_ID" | "f_id" => Ok(FeatureSet::Id),
            "f_P" | "f_p" => Ok(FeatureSet::Pose),
            "f_ALL" | "f_all" => Ok(FeatureSet::All),
            other => Err(Error::Parse(format!("unknown feature set '{other}' (f_ID, f_P, f_ALL)"))),
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::Id => "f_ID",
            FeatureSet::Pose => "f_P",
            FeatureSet::All => "f_ALL",
        })
    }
}

/// Eval-time preprocessing: resize to the model input and standardize.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPrep {
    pub input_hw: (usize, usize),
    pub stats: Standardization,
    pub batch_size: usize,
}

/// Descriptor rows (L2-normalized) for `indices` of `data`, in that order.
pub fn extract_features(
    model: &Model<f32>,
    data: &Dataset,
    indices: &[usize],
    prep: &EvalPrep,
    which: FeatureSet,
) -> Result<Tensor<f32>> {
    if which != FeatureSet::Id && !model.arch.pose_branch {
        return Err(Error::InvalidConfig(format!("{which} needs the pose branch")));
    }
    let cfg = AugmentConfig::for_input(prep.input_hw);
    let (h, w) = prep.input_hw;
    let p = model.cfg.stripe_count;
    let per_bank = p * model.cfg.fc_dim;
    let dim = if which == FeatureSet::All { 2 * per_bank } else { per_bank };
    let mut out = Tensor::zeros(vec![indices.len(), dim]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in Modality::BOTH {
        let rows: Vec<usize> = (0..indices.len()).filter(|&r| data.samples[indices[r]].modality == m).collect();
        for chunk in rows.chunks(prep.batch_size.max(1)) {
            let mut pixels = Vec::with_capacity(chunk.len() * 3 * h * w);
            for &r in chunk {
                let prepared = augment(&data.samples[indices[r]], false, &cfg, &COMPACT, &prep.stats, &mut rng);
                pixels.extend_from_slice(prepared.image.data());
            }
            let x = Tensor::new(vec![chunk.len(), 3, h, w], pixels)?;
            let bundle = match m {
                Modality::Rgb => model.infer(Some(&x), None)?,
                Modality::Ir => model.infer(None, Some(&x))?,
            };
            let banks: Vec<&Vec<Tensor<f32>>> = match which {
                FeatureSet::Id => vec![&bundle.stripe_feats_id],
                FeatureSet::Pose => vec![&bundle.stripe_feats_p],
                FeatureSet::All => vec![&bundle.stripe_feats_id, &bundle.stripe_feats_p],
            };
            for (i, &r) in chunk.iter().enumerate() {
                let dst = &mut out.data_mut()[r * dim..(r + 1) * dim];
                let mut offset = 0;
                for bank in &banks {
                    for stripe in bank.iter() {
                        let v = stripe.row(i);
                        dst[offset..offset + v.len()].copy_from_slice(v);
                        offset += v.len();
                    }
                }
            }
        }
    }
    l2_normalize_rows(&mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolKind {
    SysuAll,
    SysuIndoor,
    RegdbV2t,
    RegdbT2v,
    Synthetic,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::SysuAll => "sysu-all",
            ProtocolKind::SysuIndoor => "sysu-indoor",
            ProtocolKind::RegdbV2t => "regdb-v2t",
            ProtocolKind::RegdbT2v => "regdb-t2v",
            ProtocolKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sysu-all" => Ok(ProtocolKind::SysuAll),
            "sysu-indoor" => Ok(ProtocolKind::SysuIndoor),
            "regdb-v2t" => Ok(ProtocolKind::RegdbV2t),
            "regdb-t2v" => Ok(ProtocolKind::RegdbT2v),
            "synthetic" => Ok(ProtocolKind::Synthetic),
            other => Err(Error::Parse(format!("unknown protocol '{other}'"))),
        }
    }
}

/// SYSU indoor-search gallery cameras.
pub const SYSU_INDOOR_CAMERAS: [usize; 2] = [1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    pub kind: ProtocolKind,
    pub gallery_shots: usize,
    pub repetitions: usize,
    pub exclusion: ExclusionRule,
    pub metric: DistanceMetric,
}

impl RetrievalProtocol {
    pub fn new(kind: ProtocolKind) -> Self {
        let repetitions = match kind {
            ProtocolKind::SysuAll | ProtocolKind::SysuIndoor => 10,
            _ => 1,
        };
        RetrievalProtocol {
            kind,
            gallery_shots: 1,
            repetitions,
            exclusion: ExclusionRule::default(),
            metric: DistanceMetric::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 || self.gallery_shots == 0 {
            return Err(Error::InvalidConfig("repetitions and gallery shots must be at least 1".into()));
        }
        Ok(())
    }
}

/// Test-split identities per RegDB trial (the complement of each trial's
/// training list).
pub type TrialSplits = Vec<Vec<usize>>;

fn meta(data: &Dataset, idx: &[usize]) -> Vec<RowMeta> {
    idx.iter()
        .map(|&i| RowMeta {
            identity: data.samples[i].identity,
            camera: data.samples[i].camera,
        })
        .collect()
}

fn rank(
    feats: &Tensor<f32>,
    pos: &BTreeMap<usize, usize>,
    data: &Dataset,
    query: &[usize],
    gallery: &[usize],
    protocol: &RetrievalProtocol,
) -> Result<RankingResult> {
    let pick = |idx: &[usize]| feats.select_rows(&idx.iter().map(|i| pos[i]).collect::<Vec<_>>());
    let dist = distance_matrix(&pick(query), &pick(gallery), protocol.metric)?;
    cmc_map(&dist, &meta(data, query), &meta(data, gallery), &protocol.exclusion, MAX_RANK)
}

/// Evaluates `model` on the test dataset under `protocol`. RegDB-style
/// protocols need `trials`; the other kinds ignore it.
pub fn run_protocol(
    model: &Model<f32>,
    data: &Dataset,
    protocol: &RetrievalProtocol,
    prep: &EvalPrep,
    which: FeatureSet,
    trials: Option<&TrialSplits>,
    seed: u64,
) -> Result<RankingResult> {
    protocol.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let feats = extract_features(model, data, &all, prep, which)?;
    let pos: BTreeMap<usize, usize> = all.iter().map(|&i| (i, i)).collect();
    let ir = data.indices_of(Modality::Ir);
    let rgb = data.indices_of(Modality::Rgb);
    match protocol.kind {
        ProtocolKind::Synthetic => rank(&feats, &pos, data, &ir, &rgb, protocol),
        ProtocolKind::SysuAll | ProtocolKind::SysuIndoor => {
            let indoor = protocol.kind == ProtocolKind::SysuIndoor;
            let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for &i in &rgb {
                let s = &data.samples[i];
                if !indoor || SYSU_INDOOR_CAMERAS.contains(&s.camera) {
                    groups.entry((s.identity, s.camera)).or_default().push(i);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut runs = Vec::with_capacity(protocol.repetitions);
            for _ in 0..protocol.repetitions {
                let gallery: Vec<usize> = groups
                    .values()
                    .flat_map(|g| g.choose_multiple(&mut rng, protocol.gallery_shots).copied().collect::<Vec<_>>())
                    .collect();
                runs.push(rank(&feats, &pos, data, &ir, &gallery, protocol)?);
            }
            RankingResult::mean(&runs)
        }
        ProtocolKind::RegdbV2t | ProtocolKind::RegdbT2v => {
            let trials = trials.ok_or_else(|| Error::InvalidConfig("RegDB protocols need trial splits".into()))?;
            let mut runs = Vec::with_capacity(trials.len());
            for test_ids in trials {
                let keep = |idx: &[usize]| -> Vec<usize> {
                    idx.iter().copied().filter(|&i| test_ids.contains(&data.samples[i].identity)).collect()
                };
                let (v, t) = (keep(&rgb), keep(&ir));
                let (q, g) = if protocol.kind == ProtocolKind::RegdbV2t { (v, t) } else { (t, v) };
                runs.push(rank(&feats, &pos, data, &q, &g, protocol)?);
            }
            RankingResult::mean(&runs)
        }
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: String,
    pub feature_set: FeatureSet,
    pub result: RankingResult,
    pub repetitions: usize,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "protocol,feature_set,rank1,rank10,rank20,map,repetitions,seed";

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.protocol,
            r.feature_set,
            r.result.rank(1),
            r.result.rank(10),
            r.result.rank(20),
            r.result.map,
            r.repetitions,
            r.seed
        )?;
    }
    Ok(())
}

/// Full CMC curves, one line per `(protocol, feature set, rank)`.
pub fn write_cmc_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "protocol,feature_set,rank,rate")?;
    for r in rows {
        for (k, v) in r.result.cmc.iter().enumerate() {
            writeln!(f, "{},{},{},{:.6}", r.protocol, r.feature_set, k + 1, v)?;
        }
    }
    Ok(())
}
