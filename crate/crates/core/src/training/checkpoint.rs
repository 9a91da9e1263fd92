//! Training checkpoints in the named-array container.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde_json::{json, Value};

use super::trainer::EpochRecord;
use super::ScheduleState;
use crate::container::{self, NamedArrays};
use crate::error::{Error, Result};

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Trainable parameters by name.
    pub params: BTreeMap<String, Tensor>,
    /// Non-learned state such as batch-norm statistics.
    pub buffers: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub adam_t: usize,
    pub schedule: ScheduleState,
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_dice: f64,
    pub best_epoch: Option<usize>,
    pub metric_log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_named_arrays(&self) -> Result<NamedArrays> {
        let mut na = NamedArrays::new();
        for (prefix, map) in [
            (PARAM, &self.params),
            (BUFFER, &self.buffers),
            (ADAM_M, &self.adam_m),
            (ADAM_V, &self.adam_v),
        ] {
            for (k, t) in map {
                na.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        na.set_field("kind", json!("checkpoint"));
        na.set_field("config_hash", json!(self.config_hash));
        na.set_field("schedule", serde_json::to_value(self.schedule)?);
        na.set_field("epoch", json!(self.epoch));
        na.set_field("adam_t", json!(self.adam_t));
        na.set_field("best_val_dice", json!(self.best_val_dice));
        na.set_field("best_epoch", json!(self.best_epoch));
        na.set_field("metric_log", serde_json::to_value(&self.metric_log)?);
        Ok(na)
    }

    pub fn from_named_arrays(na: NamedArrays, path: &Path) -> Result<Self> {
        let bad = |what: &str| Error::Corrupt {
            path: path.to_path_buf(),
            array: "<manifest>".into(),
            reason: format!("missing or invalid `{what}`"),
        };
        if na.field_str("kind") != Some("checkpoint") {
            return Err(bad("kind"));
        }
        fn field<T: serde::de::DeserializeOwned>(na: &NamedArrays, k: &str) -> Option<T> {
            na.field(k).cloned().and_then(|v: Value| serde_json::from_value(v).ok())
        }
        let mut ck = Checkpoint {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            adam_t: field(&na, "adam_t").ok_or_else(|| bad("adam_t"))?,
            schedule: field(&na, "schedule").ok_or_else(|| bad("schedule"))?,
            config_hash: field(&na, "config_hash").ok_or_else(|| bad("config_hash"))?,
            epoch: field(&na, "epoch").ok_or_else(|| bad("epoch"))?,
            best_val_dice: field(&na, "best_val_dice").ok_or_else(|| bad("best_val_dice"))?,
            best_epoch: field(&na, "best_epoch").ok_or_else(|| bad("best_epoch"))?,
            metric_log: field(&na, "metric_log").ok_or_else(|| bad("metric_log"))?,
        };
        for (name, t) in na.arrays {
            let slot = [
                (PARAM, &mut ck.params),
                (BUFFER, &mut ck.buffers),
                (ADAM_M, &mut ck.adam_m),
                (ADAM_V, &mut ck.adam_v),
            ]
            .into_iter()
            .find(|(p, _)| name.starts_with(p));
            match slot {
                Some((p, map)) => {
                    map.insert(name[p.len()..].to_string(), t);
                }
                None => {
                    return Err(Error::Corrupt {
                        path: path.to_path_buf(),
                        array: name,
                        reason: "unexpected array in checkpoint".into(),
                    })
                }
            }
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    container::save(path, &ck.to_named_arrays()?)
}

/// Load a checkpoint; with `expected_hash`, refuse a different config unless `force`.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>, force: bool) -> Result<Checkpoint> {
    let ck = Checkpoint::from_named_arrays(container::load(path)?, path)?;
    if let Some(h) = expected_hash {
        if h != ck.config_hash && !force {
            return Err(Error::ConfigHashMismatch {
                expected: h.to_string(),
                found: ck.config_hash,
            });
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn sample() -> Checkpoint {
        let t = |v: f32| Tensor::new(&[v, v + 1.0, v + 2.0], &Device::Cpu).unwrap();
        Checkpoint {
            params: BTreeMap::from([("decoder.w".into(), t(1.0)), ("decoder.b".into(), t(2.0))]),
            buffers: BTreeMap::from([("decoder.bn.running_mean".into(), t(0.5))]),
            adam_m: BTreeMap::from([("decoder.w".into(), t(0.1)), ("decoder.b".into(), t(0.2))]),
            adam_v: BTreeMap::from([("decoder.w".into(), t(0.3)), ("decoder.b".into(), t(0.4))]),
            adam_t: 7,
            schedule: ScheduleState::new(100, 0.05, 1e-4).at(7),
            config_hash: "abc".into(),
            epoch: 1,
            best_val_dice: 0.123456789,
            best_epoch: Some(1),
            metric_log: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_dice_mean: Some(0.123456789), lr: 1e-4 }],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&a, &sample()).unwrap();
        let ck = load_checkpoint(&a, Some("abc"), false).unwrap();
        assert_eq!(ck.metric_log, sample().metric_log);
        assert_eq!(ck.schedule, sample().schedule);
        save_checkpoint(&b, &ck).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn hash_mismatch_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        assert!(matches!(
            load_checkpoint(&p, Some("other"), false),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(load_checkpoint(&p, Some("other"), true).is_ok());
    }

    #[test]
    fn truncation_names_first_bad_array() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        std::fs::write(&p, &bytes[..8 + header + 4]).unwrap();
        let err = load_checkpoint(&p, None, false).unwrap_err().to_string();
        assert!(err.contains("adam_m/decoder.b"), "{err}");
    }
}
