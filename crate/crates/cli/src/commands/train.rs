//! `segdg train`: one assembly on one source dataset.

use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::Args;
use segdg::assembly::ModelAssembly;
use segdg::config::ExperimentConfig;
use segdg::data::{load_prepared, Split};
use segdg::error::Error;
use segdg::exec::Exec;
use segdg::seed::SeedTree;
use segdg::training::{load_checkpoint, train, TrainData, TrainOptions, LAST_CHECKPOINT};

use super::{dataset, load_config, write_text};
use crate::exit::{CmdResult, Failure};
use crate::manifest::{claim_out_dir, RunManifest, RunStatus};

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const PARAMS_CSV: &str = "params.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the checkpoint, metric log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint (default: the output directory's last checkpoint).
    #[arg(long, num_args = 0..=1)]
    pub resume: Option<Option<PathBuf>>,
    /// Overwrite an existing run, or accept a checkpoint written for a different config.
    #[arg(long)]
    pub force: bool,
    /// Stop after this many completed epochs.
    #[arg(long, hide = true)]
    pub stop_after_epoch: Option<usize>,
}

/// Train the run described by `cfg` into `out`.
pub fn execute(
    cfg: &ExperimentConfig,
    config_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
    stop_after_epoch: Option<usize>,
    device: &Device,
) -> CmdResult<RunManifest> {
    let hash = cfg.hash();
    let mut manifest = match (resume, RunManifest::load(out)?) {
        (Some(_), Some(mut m)) => {
            m.status = RunStatus::Running;
            m.finished_at = None;
            m.error = None;
            m
        }
        (_, _) => {
            claim_out_dir(out, force)?;
            RunManifest::new("train", config_path, &hash, out, cfg.seed)
        }
    };
    manifest.config_hash = hash.clone();
    write_text(
        &out.join(RESOLVED_CONFIG),
        &cfg.to_toml().map_err(|e| Failure::config(e.to_string()))?,
    )?;
    manifest.save()?;

    match run(cfg, out, resume, force, stop_after_epoch, device) {
        Ok(()) => {
            let done = stop_after_epoch.is_none_or(|s| s >= cfg.epochs);
            let status = if done { RunStatus::Completed } else { RunStatus::Running };
            manifest.finish(status, None)?;
            Ok(manifest)
        }
        Err(f) => {
            manifest.finish(RunStatus::Failed, Some(f.message.clone()))?;
            Err(f)
        }
    }
}

fn run(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
    stop_after_epoch: Option<usize>,
    device: &Device,
) -> CmdResult {
    let exec = Exec::default();
    let source = dataset(cfg, &cfg.source_dataset)?;
    let k = cfg.decoder.num_classes;
    if source.classes.len() != k {
        return Err(Error::ClassMismatch(format!(
            "dataset `{}` declares {} classes, decoder expects {k}",
            source.dataset_id,
            source.classes.len()
        ))
        .into());
    }
    let train_vols = load_prepared(&source, Split::Train, cfg.normalization, exec)?;
    let val_vols = load_prepared(&source, Split::Val, cfg.normalization, exec)?;
    log::info!(
        "{}: {} train / {} val volumes from `{}`",
        cfg.assembly().id(),
        train_vols.len(),
        val_vols.len(),
        source.dataset_id
    );

    let model = ModelAssembly::build(&cfg.assembly(), device, SeedTree::new(cfg.seed).child("init"))?;
    model.partition().write_csv(&out.join(PARAMS_CSV))?;
    let resume = match resume {
        Some(p) => {
            let p = if p.as_os_str().is_empty() { out.join(LAST_CHECKPOINT) } else { p.to_path_buf() };
            Some(load_checkpoint(&p, Some(&cfg.hash()), force)?)
        }
        None => None,
    };
    let data = TrainData::new(&train_vols, val_vols, cfg, k, exec);
    let opts = TrainOptions {
        device: device.clone(),
        out_dir: Some(out.to_path_buf()),
        resume,
        stop_after_epoch,
        exec,
    };
    let outcome = train(&model, cfg, &data, &opts)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} for {} epochs: loss {:.5}, val dice {}",
            cfg.assembly().id(),
            last.epoch,
            last.train_loss,
            last.val_dice_mean.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

pub fn cmd(args: &TrainArgs, device: &Device) -> CmdResult {
    let cfg = load_config(&args.config, args.seed)?;
    execute(
        &cfg,
        &args.config,
        &args.out,
        args.resume.as_ref().map(|p| p.as_deref().unwrap_or(Path::new(""))),
        args.force,
        args.stop_after_epoch,
        device,
    )?;
    Ok(())
}
