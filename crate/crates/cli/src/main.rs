mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] magprompt::Error),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{} propert{} failed: {}", .0.len(), if .0.len() == 1 { "y" } else { "ies" }, .0.join(", "))]
    PropertiesFailed(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(magprompt::Error::Diverged { .. }) => 1,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 1,
            CliError::PropertiesFailed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "magprompt", version, about = "Prompt tuning for frozen graph encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train an encoder by edge prediction and write `backbone.ckpt`.
    Pretrain(Overrides),
    /// Train a head (and prompts) on a frozen checkpoint for every seed.
    Tune(Overrides),
    /// Run the reweighting / edge-prompt ablation grid.
    Ablate(Overrides),
    /// Run the seeded property suite.
    Verify {
        #[command(flatten)]
        run: Overrides,
        #[arg(long, hide = true)]
        corrupt_softmax: bool,
    },
    /// Write a stochastic block model dataset to `--out`.
    Synth(Overrides),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (overrides, corrupt) = match &cli.command {
        Command::Verify { run, corrupt_softmax } => (run, *corrupt_softmax),
        Command::Pretrain(o) | Command::Tune(o) | Command::Ablate(o) | Command::Synth(o) => (o, false),
    };
    let cfg = RunConfig::resolve(overrides)?;
    cfg.validate()?;
    match cli.command {
        Command::Pretrain(_) => commands::pretrain(cfg),
        Command::Tune(_) => commands::tune(cfg),
        Command::Ablate(_) => commands::ablate(cfg),
        Command::Verify { .. } => commands::verify(cfg, corrupt),
        Command::Synth(_) => commands::synth(cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
