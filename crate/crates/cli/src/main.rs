//! `tracer`: score, calibrate, evaluate and synthesize agent trajectories.

mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use run::{Flags, RunConfig, Subcommand, EMBED_URL_ENV};

#[derive(Parser)]
#[command(name = "tracer", version, about = "Tail risk scoring for agent-user trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory (default: runs/run-<unix-seconds>-seed<seed>).
    #[arg(long = "output-dir")]
    output_dir: Option<PathBuf>,
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for splits, permutations and synthesis.
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding provider: builtin or external.
    #[arg(long)]
    provider: Option<String>,
    /// Endpoint for the external provider.
    #[arg(long = "embed-url", env = EMBED_URL_ENV, hide = true)]
    embed_url: Option<String>,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Score every episode of a trajectory log.
    Score {
        #[arg(long)]
        input: PathBuf,
        /// Calibration report (JSON) or `key = value` parameter file.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also write per-step prefix scores.
        #[arg(long)]
        prefix: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate parameters on a labeled trajectory log.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// `key = value` grid file.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate scores against labels: a trajectory log, or a scores CSV.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Alarm threshold for early warning (default: Youden-optimal).
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn flags(cmd: Command) -> Flags {
    let (command, input, common) = match cmd {
        Command::Score {
            input,
            params,
            prefix,
            common,
        } => (Subcommand::Score { params, prefix }, Some(input), common),
        Command::Fit { input, grid, common } => (Subcommand::Fit { grid }, Some(input), common),
        Command::Eval {
            input,
            params,
            threshold,
            common,
        } => (Subcommand::Eval { params, threshold }, Some(input), common),
        Command::Synth { common } => (Subcommand::Synth, None, common),
    };
    Flags {
        command,
        input,
        output_dir: common.output_dir,
        config: common.config,
        seed: common.seed,
        provider: common.provider,
        embed_url: common.embed_url,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match RunConfig::resolve(flags(cli.command)).and_then(|cfg| cfg.execute()) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
