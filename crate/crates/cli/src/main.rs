//! `ulsad`: generate synthetic data, train, calibrate, evaluate and predict.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ulsad_core::data::SyntheticCounts;
use ulsad_core::Error;

use crate::commands::SynthArgs;
use crate::config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(
    name = "ulsad",
    version,
    about = "Dual-branch anomaly detection for structural and logical defects"
)]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic MVTec-style dataset with structural and logical defects.
    SynthGen {
        /// Dataset root to create.
        #[arg(short, long)]
        output: PathBuf,
        /// Scene description (TOML); the built-in scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        validation: usize,
        #[arg(long, default_value_t = 20)]
        test_good: usize,
        #[arg(long, default_value_t = 20)]
        structural: usize,
        #[arg(long, default_value_t = 20)]
        logical: usize,
    },
    /// Fit channel statistics and train both branches.
    Train(#[command(flatten)] ConfigArgs),
    /// Fit the quantile calibration on validation images and store it in the checkpoint.
    Calibrate(#[command(flatten)] ConfigArgs),
    /// Score a test set and print Image AUROC, Pixel AUROC and AUPRO.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Further `CHECKPOINT=DATA` pairs, one per extra category.
        #[arg(long = "category", value_name = "CHECKPOINT=DATA")]
        categories: Vec<String>,
    },
    /// Score images and write anomaly maps (.npy) and heatmaps (.png).
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the calibrated local and global maps.
        #[arg(long)]
        emit_branch_maps: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen {
            output,
            scene,
            seed,
            train,
            validation,
            test_good,
            structural,
            logical,
        } => commands::synth_gen(&SynthArgs {
            output,
            scene,
            seed,
            counts: SyntheticCounts {
                train,
                validation,
                test_good,
                structural,
                logical,
            },
        }),
        Command::Train(a) => commands::train_cmd(&a.load()?),
        Command::Calibrate(a) => commands::calibrate_cmd(&a.load()?),
        Command::Evaluate { cfg, categories } => {
            let cfg = cfg.load()?;
            let mut ckpts = Vec::new();
            let mut roots = Vec::new();
            if cfg.data.root.is_some() || categories.is_empty() {
                ckpts.push(cfg.checkpoint_path());
                roots.push(cfg.data_root()?.to_path_buf());
            }
            for c in &categories {
                let Some((k, d)) = c.split_once('=') else {
                    return Err(
                        Error::Config(format!("--category expects CHECKPOINT=DATA, got `{c}`")).into(),
                    );
                };
                ckpts.push(PathBuf::from(k));
                roots.push(PathBuf::from(d));
            }
            commands::evaluate_cmd(&cfg, &ckpts, &roots)
        }
        Command::Predict {
            cfg,
            emit_branch_maps,
            images,
        } => commands::predict_cmd(&cfg.load()?, &images, emit_branch_maps),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Contract(_) => 1,
                Error::NonFinite { .. } | Error::Tensor(_) => 3,
                Error::Shape(_)
                | Error::Input(_)
                | Error::Data(_)
                | Error::Calibration(_)
                | Error::Metric(_)
                | Error::Persistence(_)
                | Error::Io { .. }
                | Error::Image { .. } => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 2;
        }
    }
    1
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
