use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ilseg::data::{Manifest, Split};
use ilseg::experiment::{Experiment, ExperimentConfig, TrainOptions, TrainOutcome};
use ilseg::train::{load_checkpoint, Mode};
use ilseg::Error;

/// Incremental multi-organ segmentation experiments on synthetic data.
#[derive(Parser)]
#[command(name = "ilseg", version)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the stage datasets and the fully labeled val/test sets.
    GenData {
        /// Output directory (defaults to the configuration's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train through all stages, for one mode or every configured mode.
    Train {
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
        /// Train a single stage.
        #[arg(long)]
        stage: Option<usize>,
        /// Output directory (defaults to the configuration's).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        interrupt_after: Option<usize>,
    },
    /// Score a checkpoint on a manifest split and write the CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Combine the runs' reports into a CSV and a forgetting-curve SVG.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn experiment(cli: &Cli, out: &Option<PathBuf>) -> anyhow::Result<Experiment> {
    let Some(path) = &cli.config else {
        bail!(Error::Config("--config is required".into()));
    };
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out.clone();
    }
    Ok(Experiment::new(config)?)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { out } => {
            let exp = experiment(cli, out)?;
            let data = exp.generate_data()?;
            log::info!(
                "wrote {} stage datasets and the full val/test sets under {}",
                data.stage_manifests.len(),
                exp.data_root().display()
            );
        }
        Command::Train {
            mode,
            resume,
            stage,
            out,
            interrupt_after,
        } => {
            let exp = experiment(cli, out)?;
            let opts = TrainOptions {
                resume: *resume,
                only_stage: *stage,
                interrupt_after: *interrupt_after,
            };
            let modes = mode.map_or_else(|| exp.config.modes.clone(), |m| vec![m]);
            for mode in modes {
                match exp.train(mode, &opts)? {
                    TrainOutcome::Complete(paths) => {
                        for p in paths {
                            log::info!("checkpoint {}", p.display());
                        }
                    }
                    TrainOutcome::Interrupted { stage, epochs_done } => {
                        log::warn!("{mode} interrupted in stage {stage} after {epochs_done} epochs");
                        break;
                    }
                }
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            split,
            batch_size,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let data = Manifest::load(manifest)?.load_split(*split)?;
            let report = ilseg::metrics::evaluate(&ckpt.model, &data, ckpt.stage, *batch_size)?;
            std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Report { runs, out } => {
            let rows = ilseg::report::write_report(runs, out)?;
            log::info!("{} rows written to {}", rows.len(), out.join("report.csv").display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::SampleFile { .. }
            | Error::Manifest(_)
            | Error::Checkpoint(_),
        ) => 2,
        Some(Error::Lineage(_)) => 3,
        Some(Error::CategoryMismatch(_)) => 4,
        Some(Error::NoRuns(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
