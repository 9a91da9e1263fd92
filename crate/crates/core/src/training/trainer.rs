//! The epoch loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::optim::AdamW;
use super::{lr_at_step, segmentation_loss, ScheduleState};
use crate::assembly::ModelAssembly;
use crate::config::ExperimentConfig;
use crate::data::{augment_batch_with, slice_iterator, SliceBatch, SliceSet, VolumeSample};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_dataset;
use crate::exec::Exec;
use crate::seed::SeedTree;

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when there is no validation split.
    pub val_dice_mean: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: SliceSet,
    pub val: Vec<VolumeSample>,
    pub num_classes: usize,
}

impl TrainData {
    pub fn new(train: &[VolumeSample], val: Vec<VolumeSample>, cfg: &ExperimentConfig, num_classes: usize, exec: Exec) -> Self {
        Self {
            train: SliceSet::from_volumes(train, cfg.slice_axis, cfg.slice_size, exec),
            val,
            num_classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub device: Device,
    /// Where `metrics.jsonl` and the checkpoints go.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (for interrupted-run tests).
    pub stop_after_epoch: Option<usize>,
    pub exec: Exec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            device: Device::Cpu,
            out_dir: None,
            resume: None,
            stop_after_epoch: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub last: Checkpoint,
    /// Snapshot at the best validation Dice (the last epoch without validation).
    pub best: Checkpoint,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";

/// Copy checkpoint parameters and buffers into a model.
pub fn restore_model(model: &ModelAssembly, ck: &Checkpoint) -> Result<()> {
    for (name, _) in model.store.trainable_vars() {
        let t = ck
            .params
            .get(&name)
            .ok_or_else(|| Error::MissingWeight(name.clone()))?;
        model.store.assign(&name, t)?;
    }
    for (name, _) in model.store.buffers() {
        if let Some(t) = ck.buffers.get(&name) {
            model.store.assign(&name, t)?;
        }
    }
    Ok(())
}

fn snapshot(
    model: &ModelAssembly,
    opt: &AdamW,
    sched: ScheduleState,
    hash: &str,
    epoch: usize,
    best: (f64, Option<usize>),
    log: &[EpochRecord],
) -> Result<Checkpoint> {
    let deep = |v: Vec<(String, candle_core::Var)>| -> Result<BTreeMap<String, Tensor>> {
        v.into_iter()
            .map(|(n, var)| Ok((n, var.as_tensor().copy()?)))
            .collect()
    };
    let (m, v) = opt.moments();
    Ok(Checkpoint {
        params: deep(model.store.trainable_vars())?,
        buffers: deep(model.store.buffers())?,
        adam_m: m,
        adam_v: v,
        adam_t: opt.t,
        schedule: sched,
        config_hash: hash.to_string(),
        epoch,
        best_val_dice: best.0,
        best_epoch: best.1,
        metric_log: log.to_vec(),
    })
}

fn batch_tensors(b: &SliceBatch, device: &Device) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = b.images.dim();
    let x = Tensor::from_vec(b.images.iter().copied().collect::<Vec<f32>>(), (n, c, h, w), device)?;
    let m = Tensor::from_vec(b.masks.iter().map(|&v| v as u32).collect::<Vec<u32>>(), (n, h, w), device)?;
    Ok((x, m))
}

fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&tmp, e))?;
    }
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Train the trainable partition of `model` per `cfg`.
pub fn train(model: &ModelAssembly, cfg: &ExperimentConfig, data: &TrainData, opts: &TrainOptions) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::Data("training split has no slices".into()));
    }
    let hash = cfg.hash();
    let spe = data.train.num_batches(cfg.batch_size);
    let mut sched = ScheduleState::new(cfg.epochs * spe, cfg.warmup_fraction, cfg.base_lr);
    let mut opt = AdamW::new(model.store.trainable_vars(), cfg.weight_decay)?;
    let mut log = Vec::new();
    let mut start = 0;
    let mut best = (-1.0, None);
    let mut best_ck = None;
    if let Some(ck) = &opts.resume {
        if ck.config_hash != hash {
            return Err(Error::ConfigHashMismatch {
                expected: hash,
                found: ck.config_hash.clone(),
            });
        }
        restore_model(model, ck)?;
        opt.restore(&ck.adam_m, &ck.adam_v, ck.adam_t)?;
        sched = ck.schedule;
        log = ck.metric_log.clone();
        start = ck.epoch;
        best = (ck.best_val_dice, ck.best_epoch);
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if opts.resume.is_some() {
            if let Ok(ck) = super::load_checkpoint(&dir.join(BEST_CHECKPOINT), Some(&hash), false) {
                best_ck = Some(ck);
            }
        }
    }

    let root = SeedTree::new(cfg.seed);
    let inference = cfg.inference_options();
    let dice = cfg.dice_options();
    let mut last = None;
    for epoch in start..cfg.epochs {
        if opts.stop_after_epoch.is_some_and(|s| epoch >= s) {
            break;
        }
        let shuffle = root.child("shuffle").index(epoch as u64);
        let aug_seeds = root.child("augment").index(epoch as u64);
        let (mut loss_sum, mut count) = (0f64, 0usize);
        let mut lr = 0.0;
        for (bi, batch) in slice_iterator(&data.train, cfg.batch_size, Some(shuffle)).enumerate() {
            let batch = augment_batch_with(&batch, &cfg.augmentation, aug_seeds.index(bi as u64), opts.exec);
            let (x, masks) = batch_tensors(&batch, &opts.device)?;
            lr = lr_at_step(&sched);
            let out = model.forward(&x, true)?;
            let loss = segmentation_loss(&out, &masks, cfg.aux_weight)?;
            let value = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
            if !value.is_finite() {
                let provenance = batch
                    .provenance
                    .iter()
                    .map(|(s, i)| format!("{s}#{i}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::NonFinite {
                    loss: value,
                    step: sched.step,
                    lr,
                    provenance,
                });
            }
            let grads = loss.backward()?;
            opt.step(&grads, lr, cfg.grad_clip)?;
            sched.step += 1;
            loss_sum += value as f64 * batch.len() as f64;
            count += batch.len();
        }
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate_dataset(model, &data.val, data.num_classes, inference, dice, &opts.device)?.mean)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / count as f64,
            val_dice_mean: val,
            lr,
        };
        log::info!(
            "epoch {} loss {:.5} val {:?} lr {:.3e}",
            record.epoch,
            record.train_loss,
            record.val_dice_mean,
            record.lr
        );
        log.push(record);
        let improved = match val {
            Some(v) => v > best.0,
            None => true,
        };
        if improved {
            best = (val.unwrap_or(-1.0), Some(epoch + 1));
        }
        let ck = snapshot(model, &opt, sched, &hash, epoch + 1, best, &log)?;
        if improved {
            best_ck = Some(ck.clone());
        }
        if let Some(dir) = &opts.out_dir {
            write_log(&dir.join(METRICS_FILE), &log)?;
            save_checkpoint(&dir.join(LAST_CHECKPOINT), &ck)?;
            if improved {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), &ck)?;
            }
        }
        last = Some(ck);
    }
    let last = match last {
        Some(ck) => ck,
        None => snapshot(model, &opt, sched, &hash, start, best, &log)?,
    };
    let best = best_ck.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { log, last, best })
}
