//! Resampling and intensity normalization.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Percentile,
    ZnormMinmax,
}

/// Per-volume statistics used by a normalization, kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mode: NormMode,
    pub p1: f64,
    pub p99: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Percentile `p` (0..=100) of sorted data, linear between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    if t == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * t
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

fn with_voxels(v: &VolumeSample, data: Vec<f64>) -> VolumeSample {
    let mut out = v.clone();
    out.voxels = Array3::from_shape_vec(v.voxels.raw_dim(), data.into_iter().map(|x| x as f32).collect())
        .expect("same length");
    out
}

/// `(x - p1) / (p99 - p1)` with per-volume 1st and 99th percentiles.
pub fn normalize_percentile(v: &VolumeSample) -> Result<(VolumeSample, NormalizationParams)> {
    let values: Vec<f64> = v.voxels.iter().map(|&x| x as f64).collect();
    if values.is_empty() {
        return Err(Error::Data(format!("{}: empty volume", v.subject_id)));
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let p1 = percentile(&sorted, 1.0);
    let p99 = percentile(&sorted, 99.0);
    if !(p99 > p1) {
        return Err(Error::Data(format!(
            "{}: 1st and 99th percentiles coincide ({p1}); volume is constant-like",
            v.subject_id
        )));
    }
    let (mu, sigma) = mean_std(&values);
    let scale = p99 - p1;
    let out = values.iter().map(|x| (x - p1) / scale).collect();
    Ok((
        with_voxels(v, out),
        NormalizationParams {
            mode: NormMode::Percentile,
            p1,
            p99,
            mu,
            sigma,
        },
    ))
}

/// Z-score with per-volume mean and standard deviation, then min-max to [0, 1].
pub fn normalize_znorm_minmax(v: &VolumeSample) -> Result<(VolumeSample, NormalizationParams)> {
    let values: Vec<f64> = v.voxels.iter().map(|&x| x as f64).collect();
    if values.is_empty() {
        return Err(Error::Data(format!("{}: empty volume", v.subject_id)));
    }
    let (mu, sigma) = mean_std(&values);
    if !(sigma > 0.0) {
        return Err(Error::Data(format!("{}: standard deviation is 0", v.subject_id)));
    }
    let z: Vec<f64> = values.iter().map(|x| (x - mu) / sigma).collect();
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Data(format!("{}: volume is constant after z-scoring", v.subject_id)));
    }
    let out = z.iter().map(|x| (x - lo) / (hi - lo)).collect();
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    Ok((
        with_voxels(v, out),
        NormalizationParams {
            mode: NormMode::ZnormMinmax,
            p1: percentile(&sorted, 1.0),
            p99: percentile(&sorted, 99.0),
            mu,
            sigma,
        },
    ))
}

/// Source index pairs and weight along one axis (half-voxel-centre alignment).
fn axis_weights(n_in: usize, n_out: usize, ratio: f64) -> Vec<(usize, usize, f64, usize)> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            let nearest = src.round() as usize;
            (lo, hi, src - lo as f64, nearest.min(n_in - 1))
        })
        .collect()
}

/// Resample to `target` spacing: trilinear for voxels, nearest for labels.
pub fn resample_volume(v: &VolumeSample, target: [f64; 3]) -> Result<VolumeSample> {
    resample_volume_with(v, target, Exec::default())
}

pub fn resample_volume_with(v: &VolumeSample, target: [f64; 3], exec: Exec) -> Result<VolumeSample> {
    if target.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Data(format!("target spacing must be positive, got {target:?}")));
    }
    if target == v.spacing_mm {
        return Ok(v.clone());
    }
    let old = v.shape();
    let mut new = [0usize; 3];
    for a in 0..3 {
        new[a] = (old[a] as f64 * v.spacing_mm[a] / target[a]).round() as usize;
    }
    if new.contains(&0) {
        return Err(Error::Data(format!(
            "resampling {old:?} at {:?} mm to {target:?} mm gives a degenerate shape {new:?}",
            v.spacing_mm
        )));
    }
    let ax: Vec<_> = (0..3)
        .map(|a| axis_weights(old[a], new[a], target[a] / v.spacing_mm[a]))
        .collect();
    let planes = exec.map_range(new[0], |z| {
        let (z0, z1, tz, zn) = ax[0][z];
        let mut vox = Vec::with_capacity(new[1] * new[2]);
        let mut lab = Vec::with_capacity(new[1] * new[2]);
        for &(y0, y1, ty, yn) in &ax[1] {
            for &(x0, x1, tx, xn) in &ax[2] {
                let g = |zz: usize, yy: usize, xx: usize| v.voxels[[zz, yy, xx]] as f64;
                let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                let c00 = lerp(g(z0, y0, x0), g(z0, y0, x1), tx);
                let c01 = lerp(g(z0, y1, x0), g(z0, y1, x1), tx);
                let c10 = lerp(g(z1, y0, x0), g(z1, y0, x1), tx);
                let c11 = lerp(g(z1, y1, x0), g(z1, y1, x1), tx);
                let c0 = lerp(c00, c01, ty);
                let c1 = lerp(c10, c11, ty);
                vox.push(lerp(c0, c1, tz) as f32);
                lab.push(v.labels[[zn, yn, xn]]);
            }
        }
        (vox, lab)
    });
    let mut vox = Vec::with_capacity(new.iter().product());
    let mut lab = Vec::with_capacity(new.iter().product());
    for (a, b) in planes {
        vox.extend(a);
        lab.extend(b);
    }
    let shape = (new[0], new[1], new[2]);
    VolumeSample::new(
        Array3::from_shape_vec(shape, vox).expect("sized"),
        Array3::from_shape_vec(shape, lab).expect("sized"),
        target,
        v.dataset_id.clone(),
        v.subject_id.clone(),
    )
}

/// Number of slices along `axis`.
pub(crate) fn axis_len(v: &VolumeSample, axis: usize) -> usize {
    v.voxels.len_of(Axis(axis))
}
