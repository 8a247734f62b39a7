use std::io::Write;
use std::path::Path;

use log::info;

use super::config::TrainConfig;
use super::run::{train, TrainOptions};
use crate::data::{synth_generate, Dataset, SynthSpec};
use crate::error::Result;
use crate::eval::{run_protocol, EvalPrep, FeatureSet, RankingResult, RetrievalProtocol, TrialSplits};
use crate::network::{Preset, ScaleConfig};

pub const ABLATION_HEADER: &str = "config,rank1_id,rank10_id,rank20_id,map_id,rank1_all,rank10_all,rank20_all,map_all";

/// The cumulative configurations, Baseline first.
pub const ABLATION_STEPS: [&str; 4] = ["Baseline", "+PEB", "+PEB+L_pose", "+PEB+L_pose+HFC"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: TrainConfig,
    pub f_id: RankingResult,
    /// Absent for the Baseline, which has no pose features.
    pub f_all: Option<RankingResult>,
}

/// `base` with the ablation switches set for step `i` of [`ABLATION_STEPS`].
pub fn ablation_config(base: &TrainConfig, i: usize) -> TrainConfig {
    TrainConfig {
        enable_pose_branch: i >= 1,
        enable_pose_loss: i >= 2,
        enable_hfc: i >= 3,
        ..base.clone()
    }
}

pub const BENCHMARK_TRAIN_IDS: usize = 20;
pub const BENCHMARK_TEST_IDS: usize = 10;
pub const BENCHMARK_IMAGES: usize = 10;
/// Test images per identity and modality; evaluation is cheap, so the
/// held-out split is larger to steady the retrieval scores.
pub const BENCHMARK_TEST_IMAGES: usize = 20;

/// The built-in synthetic benchmark: disjoint train and test identities,
/// [`BENCHMARK_IMAGES`] training and [`BENCHMARK_TEST_IMAGES`] test images per
/// identity and modality.
pub fn synthetic_benchmark(preset: Preset, seed: u64) -> Result<(Dataset, Dataset)> {
    let scale = ScaleConfig::preset(preset, 1);
    let spec = |ids, images_per_modality| SynthSpec {
        identities: ids,
        images_per_modality,
        input_hw: scale.input_hw,
        keypoint_count: scale.keypoint_count,
        seed,
    };
    let train = synth_generate(&spec(0..BENCHMARK_TRAIN_IDS, BENCHMARK_IMAGES))?;
    let test = synth_generate(&spec(BENCHMARK_TRAIN_IDS..BENCHMARK_TRAIN_IDS + BENCHMARK_TEST_IDS, BENCHMARK_TEST_IMAGES))?;
    Ok((train, test))
}

/// Evaluation inputs shared by every ablation run.
pub struct EvalSetup<'a> {
    pub test: &'a Dataset,
    pub protocol: &'a RetrievalProtocol,
    pub trials: Option<&'a TrialSplits>,
    pub batch_size: usize,
}

/// Trains and evaluates the four cumulative configurations with the seed of
/// `base`.
pub fn ablate(base: &TrainConfig, train_data: &Dataset, eval: &EvalSetup<'_>, opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_STEPS.len());
    for (i, name) in ABLATION_STEPS.iter().enumerate() {
        let cfg = ablation_config(base, i);
        info!("ablation step {name}");
        let run_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("run{i}"))),
            workers: opts.workers,
        };
        let out = train(&cfg, train_data, &run_opts)?;
        let prep = EvalPrep {
            input_hw: out.model.cfg.input_hw,
            stats: out.manifest.standardization,
            batch_size: eval.batch_size,
        };
        let measure =
            |which| run_protocol(&out.model, eval.test, eval.protocol, &prep, which, eval.trials, base.seed);
        let f_id = measure(FeatureSet::Id)?;
        let f_all = if cfg.enable_pose_branch { Some(measure(FeatureSet::All)?) } else { None };
        rows.push(AblationRow {
            name,
            config: cfg,
            f_id,
            f_all,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{ABLATION_HEADER}")?;
    let cells = |r: Option<&RankingResult>| match r {
        Some(r) => format!("{:.6},{:.6},{:.6},{:.6}", r.rank(1), r.rank(10), r.rank(20), r.map),
        None => "n/a,n/a,n/a,n/a".to_string(),
    };
    for r in rows {
        writeln!(f, "{},{},{}", r.name, cells(Some(&r.f_id)), cells(r.f_all.as_ref()))?;
    }
    Ok(())
}
