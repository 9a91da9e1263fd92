pub mod convert;
pub mod evaluate;
pub mod params;
pub mod phantoms;
pub mod sweep;
pub mod train;

use std::path::Path;

use candle_core::Device;
use segdg::config::{validate_config, ExperimentConfig};
use segdg::data::DatasetManifest;

use crate::exit::{CmdResult, Failure};

/// Parse and validate a config, applying a seed override first.
pub fn load_config(path: &Path, seed: Option<u64>) -> CmdResult<ExperimentConfig> {
    if !path.exists() {
        return Err(Failure::config(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    validate_config(&cfg).map_err(|e| Failure::config(e.to_string()))
}

/// `cpu`, `cuda`, `cuda:N` or `auto` (CUDA when available, else CPU).
pub fn select_device(name: &str) -> CmdResult<Device> {
    let name = name.trim().to_ascii_lowercase();
    let cuda = |i: usize| {
        Device::new_cuda(i).map_err(|e| Failure::config(format!("device `{name}` is unavailable: {e}")))
    };
    match name.as_str() {
        "" | "auto" => Ok(Device::cuda_if_available(0).unwrap_or(Device::Cpu)),
        "cpu" => Ok(Device::Cpu),
        "cuda" | "gpu" => cuda(0),
        other => match other.strip_prefix("cuda:").and_then(|i| i.parse().ok()) {
            Some(i) => cuda(i),
            None => Err(Failure::config(format!(
                "unknown device `{name}` (expected cpu, cuda, cuda:N or auto)"
            ))),
        },
    }
}

/// Load the manifest of a configured dataset id.
pub fn dataset(cfg: &ExperimentConfig, id: &str) -> CmdResult<DatasetManifest> {
    Ok(DatasetManifest::load(cfg.dataset_manifest(id)?)?)
}

pub fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(segdg::Error::io(dir, e)))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::from(segdg::Error::io(path, e)))
}
