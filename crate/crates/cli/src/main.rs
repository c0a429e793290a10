//! `recdepth` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalArgs, PredictArgs};
use config::{Overrides, RunConfig};
use recdepth::data::kitti::Split;
use recdepth::{Mode, SparsePattern};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(anyhow::Error),
    /// Failure while doing the work; exit code 2.
    Runtime(anyhow::Error),
}

#[derive(Parser)]
#[command(name = "recdepth", version, about = "Recurrent depth estimation on video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// supervised, self_pred or self_comp.
    #[arg(long)]
    mode: Option<Mode>,
    /// Sparse input pattern: rand<N>, line<N> or full.
    #[arg(long)]
    pattern: Option<SparsePattern>,
    /// Shorthand for --pattern rand<N>.
    #[arg(long)]
    points: Option<usize>,
    /// Shorthand for --pattern line<N>.
    #[arg(long)]
    lines: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root.
    #[arg(long, env = "RECDEPTH_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Tiny model, short schedule and small synthetic set.
    #[arg(long)]
    smoke: bool,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into the data root.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage training on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate whole sequences and write metrics.csv and plots.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image-based checkpoint to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also evaluate over the sweep grid of point and line counts.
        #[arg(long)]
        sweep: bool,
    },
    /// Predict depth for a directory of frames.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of PNG frames, processed in name order as one sequence.
        #[arg(long)]
        frames: PathBuf,
        /// Directory of 16-bit sparse depth PNGs named like the frames.
        #[arg(long)]
        sparse: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref()).map_err(CliError::Usage)?;
    let o = Overrides {
        mode: c.mode,
        pattern: c.pattern,
        points: c.points,
        lines: c.lines,
        seed: c.seed,
        data_root: c.data_root.clone(),
        out_dir: c.out_dir.clone(),
        smoke: c.smoke,
    };
    cfg.apply(&o).map_err(CliError::Usage)?;
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = resolve(&common)?;
            let root = commands::synth(&cfg, common.force)?;
            println!("{}", root.display());
        }
        Command::Train { common, resume } => {
            let cfg = resolve(&common)?;
            let ckpt = commands::train(&cfg, resume, common.force)?;
            println!("{}", ckpt.display());
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
            split,
            sweep,
        } => {
            let cfg = resolve(&common)?;
            let args = EvalArgs {
                checkpoint,
                baseline,
                split,
                sweep,
            };
            for p in commands::eval(&cfg, &args)? {
                println!("{}", p.display());
            }
        }
        Command::Predict {
            checkpoint,
            frames,
            sparse,
            out,
        } => {
            let args = PredictArgs {
                checkpoint,
                frames,
                sparse,
                out,
            };
            let written = commands::predict(&args)?;
            println!("{} depth maps written to {}", written.len(), args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
