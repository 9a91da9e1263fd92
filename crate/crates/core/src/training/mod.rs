//! Loss, learning-rate schedule, optimizer, checkpoints and the epoch loop.

mod checkpoint;
mod optim;
mod trainer;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoders::DecodeOutput;
use crate::error::{Error, Result};
use crate::nn::log_softmax;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::AdamW;
pub use trainer::{
    restore_model, train, EpochRecord, TrainData, TrainOptions, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT,
    METRICS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
}

impl ScheduleState {
    /// `warmup_steps = max(1, round(warmup_fraction · total_steps))`.
    pub fn new(total_steps: usize, warmup_fraction: f64, base_lr: f64) -> Self {
        let total_steps = total_steps.max(1);
        let warmup = ((warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps);
        Self {
            step: 0,
            total_steps,
            warmup_steps: warmup,
            base_lr,
        }
    }

    pub fn at(self, step: usize) -> Self {
        Self { step, ..self }
    }
}

/// Linear warm-up over `warmup_steps`, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(s: &ScheduleState) -> f64 {
    if s.step < s.warmup_steps {
        s.base_lr * ((s.step + 1) as f64 / s.warmup_steps as f64)
    } else if s.total_steps == s.warmup_steps {
        0.0
    } else {
        let left = s.total_steps.saturating_sub(s.step);
        s.base_lr * (left as f64 / (s.total_steps - s.warmup_steps) as f64)
    }
}

/// Mean per-pixel cross-entropy of `B×K×H×W` logits against `B×H×W` class ids.
pub fn cross_entropy(logits: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if masks.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "masks {:?} do not match logits {:?}",
            masks.dims(),
            logits.dims()
        )));
    }
    let idx = masks.to_dtype(DType::U32)?;
    let max = idx.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
    if max >= k {
        return Err(Error::Data(format!("label {max} out of range for {k} classes")));
    }
    let logp = log_softmax(&logits.to_dtype(DType::F32)?, 1)?;
    let picked = logp.gather(&idx.unsqueeze(1)?.contiguous()?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Main cross-entropy plus `aux_weight` times the cross-entropy of every auxiliary output.
pub fn segmentation_loss(out: &DecodeOutput, masks: &Tensor, aux_weight: f64) -> Result<Tensor> {
    let mut loss = cross_entropy(&out.logits, masks)?;
    if let Some(aux) = &out.aux_logits {
        for a in aux {
            loss = (loss + (cross_entropy(a, masks)? * aux_weight)?)?;
        }
    }
    Ok(loss)
}
