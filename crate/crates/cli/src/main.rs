//! `retree` — desk-scale retinal vessel/fundus diffusion pipeline.
//!
//! One subcommand per pipeline stage: synthesize a paired dataset, train the
//! two diffusion stages, the discriminator, the super-resolution generator
//! and the segmentation UNet, then sample, filter, evaluate and render
//! comparison grids. All randomness derives from --seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retree_core::error::{Error, ErrorCategory, Result};
use retree_core::training::DiffusionStage;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "retree", version, about = "Retinal vessel/fundus diffusion pipeline")]
struct Cli {
    /// Config file (flat `key = value` with [sections])
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.epochs=5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Seed for all randomness (overrides [run] seed)
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired synthetic vessel/fundus dataset
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Total number of image pairs
        #[arg(long, default_value_t = 600)]
        n: usize,
        /// train,val,test counts summing to n
        #[arg(long, default_value = "480,60,60")]
        splits: String,
        #[arg(long)]
        force: bool,
    },
    /// Train stage 1: vessel maps from noise
    TrainVessel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train stage 2: fundus images conditioned on vessel maps
    TrainFundus {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the realism discriminator on real vs generated pairs
    TrainDisc {
        /// Dataset root with real pairs
        #[arg(long)]
        data: PathBuf,
        /// Dataset root with generated pairs
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the super-resolution generator
    TrainSr {
        #[arg(long)]
        data: PathBuf,
        /// rgb (fundus images) or binary (vessel maps)
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the segmentation UNet
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a trained diffusion stage
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// vessel or fundus
        #[arg(long)]
        stage: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Directory of vessel-map PNGs to condition on (fundus stage)
        #[arg(long)]
        cond_dir: Option<PathBuf>,
        /// Stage-1 checkpoint to sample conditioning maps from (fundus stage)
        #[arg(long)]
        vessel_ckpt: Option<PathBuf>,
        /// Super-resolution checkpoint applied to the sampled images
        #[arg(long)]
        upscale: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Keep only pairs the discriminator scores above the threshold
    Filter {
        #[arg(long)]
        data: PathBuf,
        /// Discriminator checkpoint
        #[arg(long)]
        disc: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        force: bool,
    },
    /// Compare predictions against ground truth (directories, or a trained
    /// segmentation checkpoint run over a dataset split)
    Evaluate {
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Segmentation checkpoint to run (requires --data)
        #[arg(long, requires = "data", conflicts_with = "pred")]
        seg: Option<PathBuf>,
        /// Dataset root for --seg
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split evaluated with --seg
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f32>,
        /// Optional report file (key=value lines)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Render a side-by-side mosaic (input | ground truth | prediction)
    Grid {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long)]
        force: bool,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            Error::config(format!("--set expects KEY=VALUE, got '{s}'"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) {
    let from_env = std::env::var("RETREE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let threads = from_env.unwrap_or(cfg.threads);
    if threads > 0 {
        // ignore failure: the global pool can only be set once (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    init_threads(&cfg);
    match &cli.cmd {
        Cmd::SynthData {
            out,
            n,
            splits,
            force,
        } => commands::synth_data(&cfg, out, *n, splits, *force),
        Cmd::TrainVessel { data, out, resume } => {
            commands::train_diffusion_cmd(&cfg, DiffusionStage::Vessel, data, out, resume.as_ref())
        }
        Cmd::TrainFundus { data, out, resume } => {
            commands::train_diffusion_cmd(&cfg, DiffusionStage::Fundus, data, out, resume.as_ref())
        }
        Cmd::TrainDisc {
            data,
            fake,
            out,
            resume,
        } => commands::train_disc_cmd(&cfg, data, fake, out, resume.as_ref()),
        Cmd::TrainSr {
            data,
            mode,
            out,
            resume,
        } => commands::train_sr_cmd(&cfg, data, mode, out, resume.as_ref()),
        Cmd::TrainSeg { data, out, resume } => {
            commands::train_seg_cmd(&cfg, data, out, resume.as_ref())
        }
        Cmd::Sample {
            ckpt,
            stage,
            n,
            out,
            cond_dir,
            vessel_ckpt,
            upscale,
            force,
        } => commands::sample_cmd(
            &cfg,
            ckpt,
            stage,
            *n,
            out,
            cond_dir.as_ref(),
            vessel_ckpt.as_ref(),
            upscale.as_ref(),
            *force,
        ),
        Cmd::Filter {
            data,
            disc,
            out,
            threshold,
            force,
        } => commands::filter_cmd(&cfg, data, disc, out, *threshold, *force),
        Cmd::Evaluate {
            pred,
            gt,
            seg,
            data,
            split,
            threshold,
            out,
            force,
        } => {
            let source = match (pred, seg) {
                (Some(pred), None) => commands::EvalSource::Dirs {
                    pred,
                    gt: gt.as_ref().expect("clap enforces --gt with --pred"),
                },
                (None, Some(ckpt)) => commands::EvalSource::Seg {
                    ckpt,
                    data: data.as_ref().expect("clap enforces --data with --seg"),
                    split: retree_core::data::Split::parse(split)?,
                },
                _ => {
                    return Err(Error::config(
                        "evaluate needs either --pred/--gt or --seg/--data".to_string(),
                    ))
                }
            };
            commands::evaluate_cmd(&cfg, source, *threshold, out.as_ref(), *force)
        }
        Cmd::Grid {
            pred,
            gt,
            input,
            out,
            rows,
            force,
        } => commands::grid_cmd(pred, gt.as_ref(), input.as_ref(), out, *rows, *force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            };
            ExitCode::from(code)
        }
    }
}
