//! `segdg evaluate`: score a checkpoint on dataset splits.

use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, ValueEnum};
use segdg::assembly::ModelAssembly;
use segdg::config::ExperimentConfig;
use segdg::data::{load_prepared, DatasetManifest, Split};
use segdg::error::Error;
use segdg::evaluation::{evaluate_dataset, DatasetDice};
use segdg::exec::Exec;
use segdg::seed::SeedTree;
use segdg::training::{load_checkpoint, restore_model};

use super::{load_config, write_text};
use crate::exit::{CmdResult, Exit, Failure};

pub const DICE_CSV: &str = "dice.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config the checkpoint was trained with (default: `config.toml` next to the checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest(s) to score.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Output directory for `dice.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Accept a checkpoint whose config hash differs.
    #[arg(long)]
    pub force: bool,
}

/// Build the config's assembly and load the checkpoint's weights into it.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path, force: bool, device: &Device) -> CmdResult<ModelAssembly> {
    let ck = load_checkpoint(checkpoint, Some(&cfg.hash()), force)?;
    let model = ModelAssembly::build(&cfg.assembly(), device, SeedTree::new(cfg.seed).child("init"))?;
    restore_model(&model, &ck).map_err(|e| match e {
        Error::MissingWeight(w) => Failure::config(format!(
            "checkpoint {} does not fit the configured assembly: missing `{w}`",
            checkpoint.display()
        )),
        other => other.into(),
    })?;
    Ok(model)
}

/// Score `model` on one split of `manifest`.
pub fn score(
    model: &ModelAssembly,
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    split: Split,
    device: &Device,
) -> segdg::Result<DatasetDice> {
    let k = cfg.decoder.num_classes;
    if manifest.classes.len() != k {
        return Err(Error::ClassMismatch(format!(
            "dataset `{}` declares {} classes, the checkpoint predicts {k}",
            manifest.dataset_id,
            manifest.classes.len()
        )));
    }
    let vols = load_prepared(manifest, split, cfg.normalization, Exec::default())?;
    if vols.is_empty() {
        return Err(Error::Data(format!("dataset `{}` has an empty {split:?} split", manifest.dataset_id)));
    }
    evaluate_dataset(model, &vols, k, cfg.inference_options(), cfg.dice_options(), device)
}

pub fn cmd(args: &EvaluateArgs, device: &Device) -> CmdResult {
    let config = match &args.config {
        Some(c) => c.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(super::train::RESOLVED_CONFIG),
    };
    let cfg = load_config(&config, None)?;
    let model = load_model(&cfg, &args.checkpoint, args.force, device)?;
    let k = cfg.decoder.num_classes;
    let mut csv = String::from("dataset,split,volumes");
    for c in 0..k {
        csv.push_str(&format!(",class_{c}"));
    }
    csv.push_str(",mean\n");
    for path in &args.datasets {
        let manifest = DatasetManifest::load(path)?;
        let split = Split::from(args.split);
        // An incompatible class count is a checkpoint/dataset mismatch, not bad data.
        let d = score(&model, &cfg, &manifest, split, device).map_err(|e| match e {
            Error::ClassMismatch(m) => Failure::new(Exit::Config, format!("class mismatch: {m}")),
            other => other.into(),
        })?;
        let split_name = format!("{split:?}").to_lowercase();
        csv.push_str(&format!("{},{split_name},{}", manifest.dataset_id, d.per_volume.len()));
        for v in &d.per_class {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{}\n", d.mean));
        println!("{} ({:?}): mean dice {:.4}", manifest.dataset_id, split, d.mean);
    }
    write_text(&args.out.join(DICE_CSV), &csv)
}
