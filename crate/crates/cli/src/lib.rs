//! Command-line experiment runner: `train`, `eval`, `profile` and
//! `gradcheck` over the `aapl-core` library.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::{Path, PathBuf};

use aapl_core::eval::Protocol;
use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "aapl-lab", version, about = "Attribute-conditioned prompt learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train prompt parameters and write checkpoint.json, metrics.csv and
    /// resolved-config.json.
    Train {
        /// Experiment config (JSON). Omit to start from defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set alpha=0.2` or
        /// `--set dataset.num_classes=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeded replicas.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Evaluate a checkpoint under a transfer protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// base-to-new, cross-dataset or domain-shift; defaults to the
        /// config's protocol.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Restrict to these target datasets or shift labels. Repeatable.
        #[arg(long = "target")]
        targets: Vec<String>,
        /// Experiment config; defaults to resolved-config.json next to the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `<checkpoint dir>/eval-<protocol>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Silhouette profile of meta and delta tokens per augmentation kind.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of profiled images; defaults to the config's
        /// `profile_points`.
        #[arg(long)]
        points: Option<usize>,
        /// Sampling seed; defaults to the data seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `<checkpoint dir>/profile`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
}

/// Runs one command, reporting progress on `out`.
pub fn run(cli: Cli, mut out: impl Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::from(aapl_core::Error::from(e));
    match cli.command {
        Command::Train {
            config,
            overrides,
            out: dir,
            seeds,
        } => {
            let base = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            let cfg = base.with_overrides(&overrides)?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            let threads = commands::threads_from_env()?;
            let outcome = commands::train(&cfg, &dir, seeds, threads)?;
            for (i, loss) in outcome.final_losses.iter().enumerate() {
                writeln!(out, "replica {i}: final loss {loss:.6}").map_err(io)?;
            }
            for f in &outcome.files {
                writeln!(out, "wrote {}", f.display()).map_err(io)?;
            }
        }
        Command::Eval {
            checkpoint,
            protocol,
            targets,
            config,
            out: dir,
        } => {
            let cfg = commands::config_for_checkpoint(&checkpoint, config.as_deref())?;
            let (ckpt, dataset) = commands::load_run(&checkpoint, &cfg)?;
            let protocol = protocol.unwrap_or(cfg.protocol);
            let report = commands::evaluate(&ckpt, &dataset, &cfg, protocol, &targets)?;
            let dir = dir.unwrap_or_else(|| checkpoint_dir(&checkpoint).join(format!("eval-{}", protocol.name())));
            for row in &report.splits {
                writeln!(out, "{}: base {:.2} new {:.2} hm {:.2}", row.dataset, row.base, row.new, row.hm)
                    .map_err(io)?;
            }
            for row in &report.targets {
                writeln!(out, "{}: {:.2}", row.target, row.accuracy).map_err(io)?;
            }
            if let Some(avg) = report.average {
                writeln!(out, "average: {avg:.2}").map_err(io)?;
            }
            for f in commands::write_report(&report, &cfg, &dir)? {
                writeln!(out, "wrote {}", f.display()).map_err(io)?;
            }
        }
        Command::Profile {
            checkpoint,
            points,
            seed,
            config,
            out: dir,
        } => {
            let cfg = commands::config_for_checkpoint(&checkpoint, config.as_deref())?;
            let (ckpt, dataset) = commands::load_run(&checkpoint, &cfg)?;
            let dir = dir.unwrap_or_else(|| checkpoint_dir(&checkpoint).join("profile"));
            let n = points.unwrap_or(cfg.profile_points);
            let seed = seed.unwrap_or(cfg.train.seeds.data);
            for f in commands::profile(&ckpt, &dataset, &cfg, n, seed, &dir)? {
                writeln!(out, "wrote {}", f.display()).map_err(io)?;
            }
        }
        Command::Gradcheck { seed } => {
            let summary = commands::gradcheck(seed)?;
            commands::print_gradcheck(&summary, &mut out).map_err(io)?;
            if !summary.passed() {
                return Err(CliError::CheckFailed(format!(
                    "gradient check failed: worst relative error {:e}",
                    summary.worst()
                )));
            }
        }
    }
    Ok(())
}
