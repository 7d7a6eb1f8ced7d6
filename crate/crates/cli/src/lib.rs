//! Command-line runner: data generation, training, evaluation, ablation
//! and gradient checks.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use taemi_core::data::Split;

use crate::commands::{GradCheckScope, TrainOptions};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Environment variable that replaces the configured output directory.
pub const OUT_ROOT_ENV: &str = "TAEMI_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "taemi", version, about = "Text-anchored multimodal fusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted synthetic train/val/test splits and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train a model and write the report and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue the run stored in the output directory.
        #[arg(long, conflicts_with_all = ["config", "set", "seed", "overwrite"])]
        resume: bool,
        /// Stop after this many epochs; the run can be resumed later.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a split or a record file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "records")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Print JSON instead of the text block.
        #[arg(long)]
        json: bool,
    },
    /// Train every ablation variant and tabulate validation correlation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated seeds; defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        scope: GradCheckScope,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `train.base_lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ROOT_ENV)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    pub overwrite: bool,
}

impl Common {
    /// Defaults < file < `--set` < dedicated flags.
    fn resolve(&self, extra: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        extra(&mut cfg);
        cfg.resolve()
    }
}

/// Runs one command, printing its result to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n_train,
            n_val,
            n_test,
        } => {
            let cfg = common.resolve(|c| {
                c.data.n_train = n_train.unwrap_or(c.data.n_train);
                c.data.n_val = n_val.unwrap_or(c.data.n_val);
                c.data.n_test = n_test.unwrap_or(c.data.n_test);
            })?;
            let manifest = commands::gen_data(&cfg, common.overwrite)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            common,
            manifest,
            resume,
            stop_after_epochs,
        } => {
            let cfg = if resume {
                let dir = common
                    .out
                    .clone()
                    .ok_or_else(|| CliError::Usage("--resume needs --out".into()))?;
                let mut cfg = RunConfig::read_resolved(&dir)?;
                if manifest.is_some() {
                    cfg.manifest = manifest;
                }
                cfg
            } else {
                common.resolve(|c| c.manifest = manifest.or(c.manifest.take()))?
            };
            let opts = TrainOptions {
                overwrite: common.overwrite,
                resume,
                stop_after_epochs,
            };
            let report = commands::train(&cfg, &opts)?;
            match (report.best_epoch, report.best_mean_rho) {
                (Some(e), Some(r)) => println!("best epoch {e}: val mean rho {r:.6}"),
                _ => println!("no epoch had a defined validation correlation"),
            }
            println!("{}", cfg.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            records,
            batch_size,
            json,
        } => {
            let set = commands::load_eval_records(manifest.as_deref(), split, records.as_deref())?;
            let result = commands::eval(&checkpoint, &set.records, batch_size)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result).expect("plain data serializes"));
            } else {
                println!("{result}");
            }
        }
        Command::Ablate {
            common,
            manifest,
            seeds,
        } => {
            let cfg = common.resolve(|c| {
                c.manifest = manifest.or(c.manifest.take());
                if !seeds.is_empty() {
                    c.ablation.seeds = seeds;
                }
            })?;
            let table = commands::ablate(&cfg, common.overwrite)?;
            println!("{table}");
        }
        Command::Gradcheck { common, scope } => {
            let cfg = common.resolve(|_| {})?;
            let reports = commands::gradcheck(&cfg, scope)?;
            let mut worst: Option<(f64, f64)> = None;
            for (name, r) in &reports {
                println!("[{name}]\n{r}\n");
                if !r.passed && worst.is_none_or(|(e, _)| r.max_rel_error() > e) {
                    worst = Some((r.max_rel_error(), r.tolerance));
                }
            }
            if let Some((max_rel_error, tolerance)) = worst {
                return Err(CliError::GradCheckFailed {
                    max_rel_error,
                    tolerance,
                });
            }
        }
    }
    Ok(())
}
