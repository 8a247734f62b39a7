use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cmpr_core::data::{export_synthetic, load_split, synth_generate, Dataset, Layout, Split, SynthSpec};
use cmpr_core::eval::{
    run_protocol, write_cmc_csv, write_results_csv, EvalPrep, FeatureSet, ProtocolKind, ResultRow, RetrievalProtocol,
    TrialSplits,
};
use cmpr_core::network::{describe, ArchFlags, Preset, ScaleConfig};
use cmpr_core::trainer::{
    ablate, load_checkpoint, plot_cmc, plot_loss_curves, synthetic_benchmark, train, workers_from_env,
    write_ablation_csv, EvalSetup, TrainConfig, TrainOptions,
};
use cmpr_core::verify::{run_suite, CheckOutcome};
use log::info;

#[derive(Parser)]
#[command(name = "cmpr", version, about = "Pose-assisted visible-infrared person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Training configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Architecture preset: paper or tiny.
    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    dataset: PathBuf,
    /// sysu-like, regdb-like or synthetic.
    #[arg(long, default_value = "synthetic")]
    layout: Layout,
    /// RegDB-style split trial.
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset (`<out>/train`, `<out>/test`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 10)]
        test_identities: usize,
        /// Images per identity and modality.
        #[arg(long, default_value_t = 10)]
        images: usize,
    },
    /// Train a model; writes metrics.csv, loss_curves.png and checkpoint/.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint; writes results.csv, cmc.csv and cmc.png.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// f_ID, f_P or f_ALL (repeatable); defaults to every available set.
        #[arg(long)]
        features: Vec<FeatureSet>,
        /// Overrides the protocol implied by the layout.
        #[arg(long)]
        protocol: Option<ProtocolKind>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Train and evaluate the four cumulative ablation configurations.
    Ablate {
        /// Dataset root; the built-in synthetic benchmark when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        layout: Layout,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the layer shape table.
    Describe {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 395)]
        identities: usize,
    },
    /// Finite-difference gradient checks of every loss and primitive.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Render loss curves and CMC curves from CSV files.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        cmc: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = TrainConfig::load(path)?;
            if let Some(p) = cli.preset {
                cfg.preset = p;
            }
            cfg
        }
        None => TrainConfig::for_preset(cli.preset.unwrap_or(Preset::Paper)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_keypoints(preset: Preset) -> usize {
    ScaleConfig::preset(preset, 1).keypoint_count
}

fn protocol_for(layout: Layout) -> ProtocolKind {
    match layout {
        Layout::SysuLike => ProtocolKind::SysuAll,
        Layout::RegdbLike => ProtocolKind::RegdbV2t,
        Layout::Synthetic => ProtocolKind::Synthetic,
    }
}

fn trials_for(test: &Dataset, kind: ProtocolKind) -> Option<TrialSplits> {
    matches!(kind, ProtocolKind::RegdbV2t | ProtocolKind::RegdbT2v).then(|| vec![test.identities()])
}

fn print_checks(checks: &[CheckOutcome]) -> bool {
    let mut ok = true;
    for c in checks {
        let status = if c.passed() { "ok" } else { "FAILED" };
        println!("{:<24} {:>4} trials  worst rel err {:.3e}  {status}", c.name, c.trials, c.worst);
        ok &= c.passed();
    }
    ok
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Synth {
            out,
            identities,
            test_identities,
            images,
        } => {
            let cfg = train_config(&cli)?;
            let scale = ScaleConfig::preset(cfg.preset, 1);
            let spec = |ids| SynthSpec {
                identities: ids,
                images_per_modality: *images,
                input_hw: scale.input_hw,
                keypoint_count: scale.keypoint_count,
                seed: cfg.seed,
            };
            let train_data = synth_generate(&spec(0..*identities))?;
            let test_data = synth_generate(&spec(*identities..identities + test_identities))?;
            export_synthetic(&train_data, &out.join("train"))?;
            export_synthetic(&test_data, &out.join("test"))?;
            println!("train: {}", train_data.summary());
            println!("test:  {}", test_data.summary());
        }
        Command::Train { data, out, epochs } => {
            let mut cfg = train_config(&cli)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let train_data = load_split(&data.dataset, data.layout, Split::Train, data.trial, default_keypoints(cfg.preset))?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                workers: workers_from_env(),
            };
            let outcome = train(&cfg, &train_data, &opts)?;
            plot_loss_curves(&out.join("metrics.csv"), &out.join("loss_curves.png"))?;
            if let Some(last) = outcome.epochs.last() {
                println!(
                    "trained {} epochs; last epoch total loss {:.4}; checkpoint in {}",
                    outcome.epochs.len(),
                    last.total,
                    out.join("checkpoint").display()
                );
            }
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            features,
            protocol,
            repetitions,
        } => {
            let (model, manifest) = load_checkpoint(checkpoint)?;
            let test = load_split(&data.dataset, data.layout, Split::Test, data.trial, manifest.scale.keypoint_count)?;
            let kind = protocol.unwrap_or_else(|| protocol_for(data.layout));
            let mut proto = RetrievalProtocol::new(kind);
            if let Some(r) = repetitions {
                proto.repetitions = *r;
            }
            let seed = cli.seed.unwrap_or(manifest.config.seed);
            let sets = if features.is_empty() {
                if model.arch.pose_branch {
                    vec![FeatureSet::Id, FeatureSet::Pose, FeatureSet::All]
                } else {
                    vec![FeatureSet::Id]
                }
            } else {
                features.clone()
            };
            let prep = EvalPrep {
                input_hw: manifest.scale.input_hw,
                stats: manifest.standardization,
                batch_size: 32,
            };
            let trials = trials_for(&test, kind);
            let mut rows = Vec::new();
            for which in sets {
                let result = run_protocol(&model, &test, &proto, &prep, which, trials.as_ref(), seed)
                    .with_context(|| format!("evaluating {which}"))?;
                println!("{kind} {which}: rank-1 {:.4}  mAP {:.4}", result.rank(1), result.map);
                rows.push(ResultRow {
                    protocol: kind.to_string(),
                    feature_set: which,
                    result,
                    repetitions: proto.repetitions,
                    seed,
                });
            }
            std::fs::create_dir_all(out)?;
            write_results_csv(&out.join("results.csv"), &rows)?;
            write_cmc_csv(&out.join("cmc.csv"), &rows)?;
            plot_cmc(&out.join("cmc.csv"), &out.join("cmc.png"))?;
        }
        Command::Ablate {
            dataset,
            layout,
            trial,
            out,
            epochs,
        } => {
            let mut cfg = train_config(&cli)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let (train_data, test_data, layout) = match dataset {
                Some(root) => {
                    let k = default_keypoints(cfg.preset);
                    (
                        load_split(root, *layout, Split::Train, *trial, k)?,
                        load_split(root, *layout, Split::Test, *trial, k)?,
                        *layout,
                    )
                }
                None => {
                    let (a, b) = synthetic_benchmark(cfg.preset, cfg.seed)?;
                    (a, b, Layout::Synthetic)
                }
            };
            let kind = protocol_for(layout);
            let proto = RetrievalProtocol::new(kind);
            let trials = trials_for(&test_data, kind);
            let setup = EvalSetup {
                test: &test_data,
                protocol: &proto,
                trials: trials.as_ref(),
                batch_size: 32,
            };
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                workers: workers_from_env(),
            };
            let rows = ablate(&cfg, &train_data, &setup, &opts)?;
            write_ablation_csv(&out.join("ablation.csv"), &rows)?;
            for r in &rows {
                let all = r
                    .f_all
                    .as_ref()
                    .map_or("n/a".to_string(), |a| format!("rank-1 {:.4} mAP {:.4}", a.rank(1), a.map));
                println!(
                    "{:<18} f_ID rank-1 {:.4} mAP {:.4} | f_ALL {all}",
                    r.name,
                    r.f_id.rank(1),
                    r.f_id.map
                );
            }
        }
        Command::Describe {
            batch,
            baseline,
            identities,
        } => {
            let preset = match &cli.config {
                Some(_) => train_config(&cli)?.preset,
                None => cli.preset.unwrap_or(Preset::Paper),
            };
            let cfg = ScaleConfig::preset(preset, *identities);
            cfg.validate()?;
            let arch = if *baseline { ArchFlags::BASELINE } else { ArchFlags::FULL };
            print!("{}", describe(&cfg, arch, *batch));
        }
        Command::Gradcheck { seeds } => {
            let checks = run_suite(*seeds)?;
            return Ok(print_checks(&checks));
        }
        Command::Plot { metrics, cmc, out } => {
            if metrics.is_none() && cmc.is_none() {
                bail!("nothing to plot: pass --metrics and/or --cmc");
            }
            std::fs::create_dir_all(out)?;
            if let Some(m) = metrics {
                write_plot(m, &out.join("loss_curves.png"), plot_loss_curves)?;
            }
            if let Some(c) = cmc {
                write_plot(c, &out.join("cmc.png"), plot_cmc)?;
            }
        }
    }
    Ok(true)
}

fn write_plot(input: &Path, output: &Path, f: fn(&Path, &Path) -> cmpr_core::Result<()>) -> anyhow::Result<()> {
    f(input, output)?;
    info!("wrote {}", output.display());
    println!("{}", output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
