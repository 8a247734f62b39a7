use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use log::info;

use super::checkpoint::{save_checkpoint, EpochSummary, Manifest};
use super::config::{iterations_per_epoch, lr_at, TrainConfig};
use crate::data::{
    default_sigma, for_each_batch, AugmentConfig, BalancedIndex, BatchBuilder, Dataset, KeypointLayout, Modality,
    Standardization,
};
use crate::error::{Error, Result};
use crate::losses::{total_objective, LossBreakdown};
use crate::network::{apply_bn_updates, Model, ScaleConfig};
use crate::substrate::{Graph, Mode};

pub const METRICS_HEADER: &str = "epoch,iter,l_id,l_hctri,l_pose,l_kd,total,lr";
pub const WORKERS_ENV: &str = "CMPR_NUM_WORKERS";
const HEATMAP_STRIDE: usize = 4;

/// Prefetch worker count from `CMPR_NUM_WORKERS` (unset or unparsable: 0).
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.csv` and the `checkpoint/` directory.
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.iter, l.l_id, l.l_hctri, l.l_pose, l.l_kd, l.total, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub manifest: Manifest,
    pub metrics: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub iterations_per_epoch: usize,
}

/// Architecture sizes for `cfg` trained on `data`: the preset with the
/// dataset's class and keypoint counts.
pub fn scale_for(cfg: &TrainConfig, data: &Dataset) -> ScaleConfig {
    let mut scale = ScaleConfig::preset(cfg.preset, data.identities().len());
    scale.keypoint_count = data.keypoint_count;
    scale
}

fn summarize(epoch: usize, rows: &[MetricsRow]) -> EpochSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| rows.iter().map(|r| f(&r.loss)).sum::<f64>() / n;
    EpochSummary {
        epoch,
        l_id: mean(|l| l.l_id),
        l_hctri: mean(|l| l.l_hctri),
        l_pose: mean(|l| l.l_pose),
        l_kd: mean(|l| l.l_kd),
        total: mean(|l| l.total),
        lr: rows.first().map_or(0.0, |r| r.lr),
    }
}

/// Trains a fresh model on `data` (both modalities required).
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    for m in Modality::BOTH {
        if data.indices_of(m).is_empty() {
            return Err(Error::InsufficientData(format!("training data has no {m} images")));
        }
    }
    let scale = scale_for(cfg, data);
    let mut model = Model::<f32>::new(scale.clone(), cfg.arch(), cfg.seed)?;
    let layout = KeypointLayout::for_count(data.keypoint_count)?;
    let stats = Standardization::from_dataset(data);
    let class_map = data.class_map();
    let builder = BatchBuilder {
        augment: AugmentConfig::for_input(scale.input_hw),
        layout,
        stats,
        class_map: class_map.clone(),
        sigma: default_sigma(scale.heatmap_hw().0),
        heatmap_stride: HEATMAP_STRIDE,
    };
    let index = BalancedIndex::new(data);
    let iters = iterations_per_epoch(data.len(), cfg);
    let weights = cfg.loss_weights();
    let flags = cfg.loss_flags();
    let mut manifest = Manifest::new(cfg.clone(), scale, stats, class_map.keys().copied().collect());

    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    info!(
        "training {} parameters on {} images, {iters} iterations per epoch",
        model.store.num_scalars(),
        data.len()
    );

    let mut metrics = Vec::with_capacity(cfg.epochs * iters);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let started = Instant::now();
        let first = metrics.len();
        for_each_batch(data, &index, &builder, cfg.d, cfg.k, cfg.seed, epoch, iters, opts.workers, |iter, batch| {
            let mut g = Graph::new(Mode::Train);
            let vars = model.forward(&mut g, Some(&batch.rgb), Some(&batch.ir))?;
            let (root, loss) = total_objective(&mut g, &vars, &batch, &weights, flags)?;
            if let Some((term, value)) = loss.first_non_finite() {
                return Err(Error::NonFiniteLoss { term, value, epoch, iter });
            }
            let grads = g.backward(root)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.store);
            apply_bn_updates(&g, &mut model.store, model.cfg.bn_momentum);
            if cfg.grad_clip > 0.0 {
                model.store.clip_grad_norm(cfg.grad_clip as f32);
            }
            model.store.sgd_step(lr as f32, cfg.weight_decay as f32, cfg.momentum as f32, false);
            let row = MetricsRow { epoch, iter, loss, lr };
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", row.csv_line())?;
            }
            metrics.push(row);
            Ok(())
        })?;
        let summary = summarize(epoch, &metrics[first..]);
        info!(
            "epoch {epoch}: total {:.4} (id {:.4}, hctri {:.4}, pose {:.5}, kd {:.4}) lr {lr} in {:.1}s",
            summary.total,
            summary.l_id,
            summary.l_hctri,
            summary.l_pose,
            summary.l_kd,
            started.elapsed().as_secs_f64()
        );
        epochs.push(summary);
        manifest.epochs_completed = epoch + 1;
        manifest.last_epoch = Some(summary);
        if let Some(dir) = &opts.out_dir {
            if let Some(w) = csv.as_mut() {
                w.flush()?;
            }
            save_checkpoint(&dir.join("checkpoint"), &model, &manifest)?;
        }
    }
    Ok(TrainOutcome {
        model,
        manifest,
        metrics,
        epochs,
        iterations_per_epoch: iters,
    })
}
