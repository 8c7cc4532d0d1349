use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kseg::cli;
use kseg::config::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Segment synthetic cine MRI straight from undersampled k-space.
#[derive(Parser)]
#[command(name = "kseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the section the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test phantom datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint at each configured acceleration.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated accelerations replacing `eval.R_list`.
        #[arg(long, value_delimiter = ',')]
        r_list: Option<Vec<f64>>,
    },
    /// Write ground truth, prediction and zero-filling panels as PPM.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scan: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, value_delimiter = ',')]
        r_list: Option<Vec<f64>>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.phantom.seed = s;
            }
            let summary = cli::cmd_gen_data(&cfg, &common.out).context("gen-data")?;
            println!(
                "wrote {} train, {} val, {} test scans to {}",
                summary.train,
                summary.val,
                summary.test,
                common.out.display()
            );
        }
        Command::Train { common, data, resume } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let total = cfg.train.steps;
            let every = (total / 20).max(1) as u64;
            let mut first = None;
            let summary = cli::cmd_train(&cfg, &data, &common.out, resume.as_deref(), |r| {
                let start = *first.get_or_insert(r.step);
                if r.step % every == 0 || r.step + 1 == start + total as u64 {
                    eprintln!("step {} dice {:.4} bce {:.4} total {:.4}", r.step, r.dice, r.bce, r.total);
                }
            })
            .context("train")?;
            println!(
                "trained steps {}..{}; checkpoint {}",
                summary.start_step,
                summary.end_step,
                summary.checkpoint.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            r_list,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            if let Some(r) = r_list {
                cfg.eval.accelerations = r;
            }
            let report = cli::cmd_eval(&cfg, &checkpoint, &data, &common.out).context("eval")?;
            print!("{}", report.to_table());
        }
        Command::Visualize {
            common,
            checkpoint,
            data,
            scan,
            frame,
            r_list,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            if let Some(r) = r_list {
                cfg.eval.accelerations = r;
            }
            let files = cli::cmd_visualize(&cfg, &checkpoint, &data, scan, frame, &common.out).context("visualize")?;
            println!("wrote {} panels to {}", files.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
