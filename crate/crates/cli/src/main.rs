mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{split_overrides, RunConfig};
use crate::error::CliError;

/// Few-shot detection with visual prompts on a synthetic shapes world.
///
/// Any config key can be set from the command line as a dotted flag,
/// e.g. `--model.n_queries 30` or `--train.lr=0.02`.
#[derive(Parser, Debug)]
#[command(name = "fsdetr", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stream (falls back to the config, then $FSDETR_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/val/test scene splits.
    GenData {
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
        /// Number of training scenes.
        #[arg(long)]
        scenes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Label-free pre-training only.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Pre-training (unless skipped) followed by supervised episodic training.
    Train {
        /// Start from these weights and skip the pre-training they already did.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue a run exactly where its checkpoint stopped.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Episodic AP evaluation on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated shot counts, one report each.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        /// Dataset split to evaluate on.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the JSON reports here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Detect template classes in one image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target image (PPM).
        #[arg(long)]
        image: PathBuf,
        /// One template per class (PPM); repeat the flag.
        #[arg(long = "template", required = true)]
        templates: Vec<PathBuf>,
        /// Minimum score to keep a detection.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write per-template attention maps as PGM.
        #[arg(long)]
        attn: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Ablation shortcuts for the matching model keys.
#[derive(Args, Debug, Clone, Default)]
pub struct VariantFlags {
    /// Drop the prompt cross-attention from the encoder.
    #[arg(long)]
    no_mhca: bool,
    /// Share one MLP between template and query rows in the decoder.
    #[arg(long)]
    no_ts_mlp: bool,
    /// Template pooling: `attn` or `avg`.
    #[arg(long, value_parser = ["attn", "avg"])]
    pool: Option<String>,
}

impl VariantFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        if self.no_mhca {
            v.push(("model.use_encoder_mhca".into(), "false".into()));
        }
        if self.no_ts_mlp {
            v.push(("model.use_ts_mlp".into(), "false".into()));
        }
        if let Some(p) = &self.pool {
            let name = if p == "avg" { "global_avg" } else { "attention" };
            v.push(("model.pooling".into(), name.into()));
        }
        v
    }
}

fn load(common: &Common, mut overrides: Vec<(String, String)>, extra: Vec<(String, String)>) -> Result<RunConfig, CliError> {
    overrides.extend(extra);
    if let Some(d) = &common.data_dir {
        overrides.push(("data_dir".into(), serde_json::to_string(d).expect("path serializes")));
    }
    if let Some(d) = &common.out_dir {
        overrides.push(("out_dir".into(), serde_json::to_string(d).expect("path serializes")));
    }
    RunConfig::load(common.config.as_deref(), &overrides, common.seed)
}

fn validated(cfg: RunConfig) -> Result<RunConfig, CliError> {
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            // Help and version requests exit cleanly; parse failures are config errors.
            std::process::exit(if code == 0 { 0 } else { 1 });
        }
    };
    match cli.cmd {
        Command::GenData { force, scenes, common } => {
            let mut extra = Vec::new();
            if let Some(n) = scenes {
                extra.push(("world.train_scenes".into(), n.to_string()));
            }
            commands::gen_data(&validated(load(&common, overrides, extra)?)?, force)
        }
        Command::Pretrain { common, variant } => commands::pretrain(&validated(load(&common, overrides, variant.overrides())?)?),
        Command::Train {
            init,
            resume,
            epochs,
            common,
            variant,
        } => {
            let mut cfg = load(&common, overrides, variant.overrides())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                // Keep the decay at the same fraction of the run when it no longer fits.
                if cfg.train.lr_decay_epoch >= e {
                    cfg.train.lr_decay_epoch = e * 7 / 10;
                }
            }
            let cfg = validated(cfg)?;
            commands::train(&cfg, init.as_deref(), resume.as_deref(), epochs)
        }
        Command::Eval {
            checkpoint,
            shots,
            split,
            report,
            common,
            variant,
        } => {
            let requested = variant.overrides();
            let cfg = validated(load(&common, overrides, Vec::new())?)?;
            commands::eval(&cfg, &checkpoint, shots, &split, report.as_deref(), &requested)
        }
        Command::Detect {
            checkpoint,
            image,
            templates,
            threshold,
            attn,
            common,
        } => {
            let cfg = validated(load(&common, overrides, Vec::new())?)?;
            commands::detect(&cfg, &checkpoint, &image, &templates, threshold, attn)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsdetr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
