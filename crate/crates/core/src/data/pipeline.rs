//! Loading a dataset split ready for slicing: resampled and normalized.

use serde::{Deserialize, Serialize};

use super::io::{DatasetManifest, Split};
use super::preprocess::{normalize_percentile, normalize_znorm_minmax, resample_volume};
use super::VolumeSample;
use crate::error::Result;
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    Percentile,
    ZnormMinmax,
}

/// Resample to `target_spacing` (when given) and normalize.
pub fn prepare_volume(v: &VolumeSample, target_spacing: Option<[f64; 3]>, norm: Normalization) -> Result<VolumeSample> {
    let v = match target_spacing {
        Some(t) => resample_volume(v, t)?,
        None => v.clone(),
    };
    Ok(match norm {
        Normalization::None => v,
        Normalization::Percentile => normalize_percentile(&v)?.0,
        Normalization::ZnormMinmax => normalize_znorm_minmax(&v)?.0,
    })
}

/// Load one split of a dataset (resampled per its manifest) and normalize every volume.
pub fn load_prepared(manifest: &DatasetManifest, split: Split, norm: Normalization, exec: Exec) -> Result<Vec<VolumeSample>> {
    let raw = manifest.load_split(split)?;
    exec.map(&raw, |v| prepare_volume(v, None, norm))
        .into_iter()
        .collect()
}
