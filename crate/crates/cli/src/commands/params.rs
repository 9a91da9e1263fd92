//! `segdg params-report`: trainable/frozen counts of an assembly, without training.

use std::path::PathBuf;

use clap::Args;
use segdg::assembly::ModelAssembly;
use segdg::config::ExperimentConfig;

use super::write_text;
use crate::exit::{CmdResult, Failure};

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Experiment config; only the backbone, peft and decoder sections are used.
    #[arg(long)]
    pub config: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd(args: &ParamsArgs) -> CmdResult {
    if !args.config.exists() {
        return Err(Failure::config(format!("config file not found: {}", args.config.display())));
    }
    let cfg = ExperimentConfig::load(&args.config).map_err(|e| Failure::config(e.to_string()))?;
    let model = ModelAssembly::build_shapes(&cfg.assembly()).map_err(|e| Failure::config(e.to_string()))?;
    let csv = model.partition().to_csv();
    match &args.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
