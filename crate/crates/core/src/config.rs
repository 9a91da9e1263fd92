//! Experiment configuration: TOML schema, defaults and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::AssemblySpec;
use crate::backbones::BackboneSpec;
use crate::container::sha256_hex;
use crate::data::{AugmentationSpec, Normalization};
use crate::decoders::DecoderSpec;
use crate::error::{Error, Result};
use crate::evaluation::{DiceOptions, InferenceOptions};
use crate::peft::{PeftKind, PeftSpec};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_epochs() -> usize {
    40
}
fn default_lr() -> f64 {
    5e-5
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_warmup() -> f64 {
    0.05
}
fn default_batch() -> usize {
    8
}
fn default_aux() -> f64 {
    0.5
}
fn default_slice() -> usize {
    256
}
fn default_peft() -> PeftSpec {
    PeftSpec::new(PeftKind::Freeze)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    /// Dataset manifest JSON; relative paths resolve against the config file.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub source_dataset: String,
    #[serde(default)]
    pub target_datasets: Vec<String>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the first-stage loss for two-stage heads.
    #[serde(default = "default_aux")]
    pub aux_weight: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Side of the square training slices.
    #[serde(default = "default_slice")]
    pub slice_size: usize,
    /// Volume axis slices are taken along (0 = first array axis).
    #[serde(default)]
    pub slice_axis: usize,
    /// Include class 0 in mean Dice.
    #[serde(default)]
    pub dice_include_background: bool,
    /// Drop classes absent from both prediction and ground truth from the per-volume mean.
    #[serde(default)]
    pub dice_skip_both_empty: bool,
    /// Per-volume intensity normalization applied after loading.
    #[serde(default)]
    pub normalization: Normalization,
    pub backbone: BackboneSpec,
    #[serde(default = "default_peft")]
    pub peft: PeftSpec,
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Parse a config file, resolving dataset manifests relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in cfg.datasets.values_mut() {
            if entry.manifest.is_relative() {
                let joined = base.join(&entry.manifest);
                entry.manifest = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
        Ok(cfg)
    }

    pub fn assembly(&self) -> AssemblySpec {
        AssemblySpec {
            backbone: self.backbone.clone(),
            peft: self.peft.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Stable hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            slice_axis: self.slice_axis,
            size: self.slice_size,
            batch_size: self.batch_size,
        }
    }

    pub fn dice_options(&self) -> DiceOptions {
        DiceOptions {
            include_background: self.dice_include_background,
            skip_both_empty: self.dice_skip_both_empty,
        }
    }

    pub fn dataset_manifest(&self, id: &str) -> Result<&Path> {
        self.datasets
            .get(id)
            .map(|d| d.manifest.as_path())
            .ok_or_else(|| Error::Config(vec![format!("unknown dataset id `{id}`")]))
    }
}

/// Check every constraint and fill every default, reporting all violations at once.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut errs = Vec::new();
    let mut out = cfg.clone();
    if cfg.schema_version != SCHEMA_VERSION {
        errs.push(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        ));
    }
    if cfg.epochs < 1 {
        errs.push("epochs must be ≥ 1".into());
    }
    if !(cfg.base_lr > 0.0 && cfg.base_lr.is_finite()) {
        errs.push(format!("base_lr must be positive, got {}", cfg.base_lr));
    }
    if !(cfg.weight_decay > 0.0 && cfg.weight_decay.is_finite()) {
        errs.push(format!("weight_decay must be positive, got {}", cfg.weight_decay));
    }
    if !(cfg.warmup_fraction > 0.0 && cfg.warmup_fraction < 1.0) {
        errs.push(format!("warmup_fraction must be in (0, 1), got {}", cfg.warmup_fraction));
    }
    if cfg.batch_size < 1 {
        errs.push("batch_size must be ≥ 1".into());
    }
    if cfg.seed > i64::MAX as u64 {
        errs.push(format!("seed must be at most {} to fit a TOML integer, got {}", i64::MAX, cfg.seed));
    }
    if !(cfg.aux_weight >= 0.0 && cfg.aux_weight.is_finite()) {
        errs.push(format!("aux_weight must be non-negative, got {}", cfg.aux_weight));
    }
    if let Some(c) = cfg.grad_clip {
        if !(c > 0.0) {
            errs.push(format!("grad_clip must be positive, got {c}"));
        }
    }
    if cfg.slice_axis > 2 {
        errs.push(format!("slice_axis must be 0, 1 or 2, got {}", cfg.slice_axis));
    }
    if !cfg.datasets.contains_key(&cfg.source_dataset) {
        errs.push(format!("unknown dataset id `{}` (source_dataset)", cfg.source_dataset));
    }
    for t in &cfg.target_datasets {
        if !cfg.datasets.contains_key(t) {
            errs.push(format!("unknown dataset id `{t}` (target_datasets)"));
        }
    }
    errs.extend(cfg.augmentation.check());

    match cfg.backbone.dims() {
        Ok(dims) => {
            if cfg.slice_size == 0 || cfg.slice_size % dims.patch_size != 0 {
                errs.push(format!(
                    "slice_size {} must be a positive multiple of the patch size {}",
                    cfg.slice_size, dims.patch_size
                ));
            }
            errs.extend(cfg.decoder.check(&dims));
            errs.extend(cfg.peft.check(dims.embed_dim));
            if let Ok(b) = cfg.backbone.resolved() {
                out.backbone = b;
            }
            out.decoder = cfg.decoder.resolved(&dims);
        }
        Err(Error::Config(e)) => errs.extend(e),
        Err(e) => errs.push(e.to_string()),
    }
    if errs.is_empty() {
        match cfg.peft.resolved() {
            Ok(p) => out.peft = p,
            Err(e) => errs.push(e.to_string()),
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(errs))
    }
}
