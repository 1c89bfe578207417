//! `qrsim`: cut-off sweeps, policy training, evaluation and action census
//! for repeater chains.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Command;

#[derive(Parser)]
#[command(name = "qrsim", version, about = "Repeater-chain key-rate simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Uniform cut-off sweep, written as CSV.
    Sweep(Common),
    /// Train a discard policy; writes checkpoints and an epoch log.
    Train(Common),
    /// Key rate of a trained policy, written as JSON.
    Eval(Common),
    /// State/action visit counts of a trained policy, written as CSV.
    Census(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output path; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue a training run from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Census(a) => (Command::Census, a),
    };
    match commands::run(cmd, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
