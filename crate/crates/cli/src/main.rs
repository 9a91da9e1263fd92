//! `segdg` command-line entry point.

mod commands;
mod exit;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{convert, evaluate, params, phantoms, select_device, sweep, train};
use exit::Exit;

/// Train, sweep and evaluate frozen-encoder segmentation assemblies.
///
/// Exit codes: 0 success, 1 sweep finished with failed cells, 2 configuration
/// or usage error, 3 data error, 4 numeric divergence, 5 other failure.
#[derive(Debug, Parser)]
#[command(name = "segdg", version, about, long_about)]
struct Cli {
    /// Compute device: cpu, cuda, cuda:N or auto.
    #[arg(long, global = true, env = "SEGDG_DEVICE", default_value = "auto")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one assembly on its source dataset.
    Train(train::TrainArgs),
    /// Run an experiment protocol over several assemblies and emit reports.
    Sweep(sweep::SweepArgs),
    /// Score a checkpoint on dataset splits.
    Evaluate(evaluate::EvaluateArgs),
    /// Print trainable and frozen parameter counts of an assembly.
    ParamsReport(params::ParamsArgs),
    /// Write a synthetic phantom dataset.
    GenPhantoms(phantoms::PhantomArgs),
    /// Convert a public encoder checkpoint into the weight container.
    ConvertWeights(convert::ConvertArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Config } else { Exit::Ok };
            let _ = e.print();
            return code.into();
        }
    };
    let result = match &cli.command {
        Command::ParamsReport(a) => params::cmd(a),
        Command::GenPhantoms(a) => phantoms::cmd(a),
        Command::ConvertWeights(a) => convert::cmd(a),
        cmd => select_device(&cli.device).and_then(|device| match cmd {
            Command::Train(a) => train::cmd(a, &device),
            Command::Sweep(a) => sweep::cmd(a, &device),
            Command::Evaluate(a) => evaluate::cmd(a, &device),
            _ => unreachable!("handled above"),
        }),
    };
    match result {
        Ok(()) => Exit::Ok.into(),
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.exit.into()
        }
    }
}
