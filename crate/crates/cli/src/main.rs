use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vecmap_cli::ablate::{ablate, AblateArgs};
use vecmap_cli::commands::{eval, gen_data, grad_check, train, EvalArgs, GenDataArgs, GradCheckArgs, TrainArgs};
use vecmap_cli::CliResult;

/// Toy vector-map detection lab.
#[derive(Debug, Parser)]
#[command(name = "vecmap", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train a grid of configurations over several seeds and compare.
    Ablate(AblateArgs),
    /// Check every backward pass against finite differences.
    GradCheck(GradCheckArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(&a),
        Cmd::Train(a) => train(&a),
        Cmd::Eval(a) => eval(&a).map(|_| ()),
        Cmd::Ablate(a) => ablate(&a).map(|_| ()),
        Cmd::GradCheck(a) => grad_check(&a).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
