//! Training loop, step schedule, checkpoints and the ablation study.

mod ablate;
mod checkpoint;
mod config;
mod plot;
mod run;

pub use ablate::{
    ablate, ablation_config, synthetic_benchmark, write_ablation_csv, AblationRow, EvalSetup, ABLATION_HEADER,
    ABLATION_STEPS, BENCHMARK_IMAGES, BENCHMARK_TEST_IMAGES, BENCHMARK_TEST_IDS, BENCHMARK_TRAIN_IDS,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, EpochSummary, Manifest, ParamEntry, MANIFEST_FILE};
pub use config::{iterations_per_epoch, lr_at, TrainConfig, TINY_LAMBDA};
pub use run::{scale_for, train, workers_from_env, MetricsRow, TrainOptions, TrainOutcome, METRICS_HEADER, WORKERS_ENV};
pub use plot::{plot_cmc, plot_loss_curves};
