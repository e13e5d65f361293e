//! `drnet` — train, evaluate, explain and audit small dilated ResNets on
//! 8-class fundus-style images.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use drnet::{Error, Result};

use config::Config;

#[derive(Parser)]
#[command(name = "drnet", version, about = "Dilated-ResNet training and explanation toolkit")]
struct Cli {
    /// key=value file filling any flag not given explicitly
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a manifest and write a DRN1 file plus history CSV
    Train(TrainArgs),
    /// Evaluate a model: per-class precision/recall/F1 table, optional CSV
    Eval(EvalArgs),
    /// Write a saliency map (PGM), overlay (PPM) and, for lime, weights CSV
    Explain(ExplainArgs),
    /// Evaluate two models side by side (without- vs with-dilation)
    Compare(CompareArgs),
    /// Per-layer geometry and receptive-field table for a variant
    RfReport(RfReportArgs),
    /// Generate the seeded synthetic corpus
    Synth(SynthArgs),
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Network depth: 18, 34, 50, 101 or 152
    #[arg(long)]
    pub arch: Option<String>,
    /// Dilate the fourth stage (stride 1, dilation 3)
    #[arg(long)]
    pub dilated: bool,
    /// Build without batch normalization (ablation)
    #[arg(long)]
    pub no_batch_norm: bool,
    /// Training manifest CSV
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation manifest CSV; defaults to scoring the training set
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Side length images are resized to
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Channel-width multiplier (1.0 = standard widths)
    #[arg(long)]
    pub width_mult: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output model file; the history CSV lands beside it
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optional report CSV path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExplainMethod {
    Gradcam,
    Rise,
    Lime,
    Activation,
}

impl ExplainMethod {
    fn name(self) -> &'static str {
        match self {
            ExplainMethod::Gradcam => "gradcam",
            ExplainMethod::Rise => "rise",
            ExplainMethod::Lime => "lime",
            ExplainMethod::Activation => "activation",
        }
    }
}

#[derive(clap::Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Input image (PPM or PGM)
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: ExplainMethod,
    /// Target class: index or name (also used in output file names)
    #[arg(long)]
    pub class: Option<String>,
    /// Resize the image to this side length first
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: current)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Activation maps: which captured layer (default last_conv)
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub rise_masks: Option<usize>,
    #[arg(long)]
    pub rise_grid: Option<usize>,
    #[arg(long)]
    pub rise_keep: Option<f64>,
    #[arg(long)]
    pub lime_grid: Option<usize>,
    #[arg(long)]
    pub lime_samples: Option<usize>,
    #[arg(long)]
    pub lime_kernel_width: Option<f64>,
    #[arg(long)]
    pub lime_ridge: Option<f64>,
}

#[derive(clap::Args)]
pub struct CompareArgs {
    /// Model trained without dilation
    pub model_without: PathBuf,
    /// Model trained with dilation
    pub model_with: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(clap::Args)]
pub struct RfReportArgs {
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub dilated: bool,
    /// Input side length the geometry is computed for
    #[arg(long)]
    pub input: Option<usize>,
}

#[derive(clap::Args)]
pub struct SynthArgs {
    /// Output directory for images and manifest.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub disc_brightness: Option<f64>,
    #[arg(long)]
    pub strokes: Option<usize>,
    #[arg(long)]
    pub blur: Option<usize>,
}

fn apply_config(cmd: &mut Cmd, cfg: &Config) -> Result<()> {
    match cmd {
        Cmd::Train(a) => {
            cfg.fill(&mut a.arch, "arch")?;
            cfg.fill_flag(&mut a.dilated, "dilated")?;
            cfg.fill_flag(&mut a.no_batch_norm, "no-batch-norm")?;
            cfg.fill(&mut a.data, "data")?;
            cfg.fill(&mut a.val, "val")?;
            cfg.fill(&mut a.image_size, "image-size")?;
            cfg.fill(&mut a.epochs, "epochs")?;
            cfg.fill(&mut a.batch_size, "batch-size")?;
            cfg.fill(&mut a.learning_rate, "learning-rate")?;
            cfg.fill(&mut a.momentum, "momentum")?;
            cfg.fill(&mut a.weight_decay, "weight-decay")?;
            cfg.fill(&mut a.width_mult, "width-mult")?;
            cfg.fill(&mut a.seed, "seed")?;
            cfg.fill(&mut a.out, "out")?;
        }
        Cmd::Eval(a) => {
            cfg.fill(&mut a.model, "model")?;
            cfg.fill(&mut a.data, "data")?;
            cfg.fill(&mut a.image_size, "image-size")?;
            cfg.fill(&mut a.batch_size, "batch-size")?;
            cfg.fill(&mut a.out, "out")?;
        }
        Cmd::Explain(a) => {
            cfg.fill(&mut a.model, "model")?;
            cfg.fill(&mut a.image, "image")?;
            cfg.fill(&mut a.class, "class")?;
            cfg.fill(&mut a.image_size, "image-size")?;
            cfg.fill(&mut a.seed, "seed")?;
            cfg.fill(&mut a.out, "out")?;
            cfg.fill(&mut a.layer, "layer")?;
            cfg.fill(&mut a.rise_masks, "rise-masks")?;
            cfg.fill(&mut a.rise_grid, "rise-grid")?;
            cfg.fill(&mut a.rise_keep, "rise-keep")?;
            cfg.fill(&mut a.lime_grid, "lime-grid")?;
            cfg.fill(&mut a.lime_samples, "lime-samples")?;
            cfg.fill(&mut a.lime_kernel_width, "lime-kernel-width")?;
            cfg.fill(&mut a.lime_ridge, "lime-ridge")?;
        }
        Cmd::Compare(a) => {
            cfg.fill(&mut a.data, "data")?;
            cfg.fill(&mut a.image_size, "image-size")?;
            cfg.fill(&mut a.batch_size, "batch-size")?;
        }
        Cmd::RfReport(a) => {
            cfg.fill(&mut a.arch, "arch")?;
            cfg.fill_flag(&mut a.dilated, "dilated")?;
            cfg.fill(&mut a.input, "input")?;
        }
        Cmd::Synth(a) => {
            cfg.fill(&mut a.out, "out")?;
            cfg.fill(&mut a.size, "size")?;
            cfg.fill(&mut a.per_class, "per-class")?;
            cfg.fill(&mut a.seed, "seed")?;
            cfg.fill(&mut a.disc_brightness, "disc-brightness")?;
            cfg.fill(&mut a.strokes, "strokes")?;
            cfg.fill(&mut a.blur, "blur")?;
        }
    }
    Ok(())
}

fn run(mut cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    apply_config(&mut cli.command, &cfg)?;
    match cli.command {
        Cmd::Train(a) => commands::cmd_train(a),
        Cmd::Eval(a) => commands::cmd_eval(a),
        Cmd::Explain(a) => commands::cmd_explain(a),
        Cmd::Compare(a) => commands::cmd_compare(a),
        Cmd::RfReport(a) => commands::cmd_rf_report(a),
        Cmd::Synth(a) => commands::cmd_synth(a),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArg(_) | Error::Shape(_) | Error::Io(_) => 2,
        Error::Manifest { .. } | Error::Decode(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
