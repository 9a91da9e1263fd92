//! Dice metric, per-dataset evaluation and the source→target matrix.

mod matrix;
mod report;

use candle_core::{Device, Tensor};
use ndarray::{Array3, ArrayView, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::assembly::ModelAssembly;
use crate::data::{extract_slice, resize_image, resize_mask, VolumeSample};
use crate::error::{Error, Result};

pub use matrix::{dg_matrix, AssemblyInfo, DgCell, DgMatrix};
pub use report::{emit_reports, read_csv, ReportFiles};

/// `2|P∩G| / (|P|+|G|)` for one class; 1.0 when both masks are empty.
pub fn dice_score<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>, class: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (inter, p, g) = dice_counts(pred, gt, class);
    Ok(dice_from_counts(inter, p, g))
}

fn dice_counts<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>, class: u8) -> (u64, u64, u64) {
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as u64;
        g += ib as u64;
        inter += (ia && ib) as u64;
    }
    (inter, p, g)
}

fn dice_from_counts(inter: u64, p: u64, g: u64) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Per-class Dice for classes `0..k`, with a flag marking both-empty classes.
pub fn per_class_dice<D: Dimension>(
    pred: ArrayView<u8, D>,
    gt: ArrayView<u8, D>,
    k: usize,
) -> Result<Vec<(f64, bool)>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = vec![0u64; k];
    let mut p = vec![0u64; k];
    let mut g = vec![0u64; k];
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a as usize, b as usize);
        if a < k {
            p[a] += 1;
        }
        if b < k {
            g[b] += 1;
        }
        if a == b && a < k {
            inter[a] += 1;
        }
    }
    Ok((0..k)
        .map(|c| (dice_from_counts(inter[c], p[c], g[c]), p[c] + g[c] == 0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceOptions {
    pub include_background: bool,
    /// Leave classes absent from both masks out of the per-volume mean.
    pub skip_both_empty: bool,
}

impl Default for DiceOptions {
    fn default() -> Self {
        Self {
            include_background: false,
            skip_both_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDice {
    /// Class-wise Dice averaged over volumes, all `k` classes.
    pub per_class: Vec<f64>,
    /// Mean over volumes of each volume's mean over the reported classes.
    pub mean: f64,
    pub per_volume: Vec<Vec<f64>>,
}

/// Aggregate per-volume class Dice into dataset scores.
pub fn aggregate_dice(per_volume: &[Vec<(f64, bool)>], opts: DiceOptions) -> DatasetDice {
    let k = per_volume.first().map(|v| v.len()).unwrap_or(0);
    let first = if opts.include_background { 0 } else { 1 };
    let mut per_class = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut volume_means = Vec::with_capacity(per_volume.len());
    for v in per_volume {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, &(d, empty)) in v.iter().enumerate() {
            if opts.skip_both_empty && empty {
                continue;
            }
            per_class[c] += d;
            counts[c] += 1;
            if c >= first {
                sum += d;
                n += 1;
            }
        }
        volume_means.push(if n == 0 { 1.0 } else { sum / n as f64 });
    }
    for (p, n) in per_class.iter_mut().zip(&counts) {
        *p = if *n == 0 { 1.0 } else { *p / *n as f64 };
    }
    let mean = if volume_means.is_empty() {
        0.0
    } else {
        volume_means.iter().sum::<f64>() / volume_means.len() as f64
    };
    DatasetDice {
        per_class,
        mean,
        per_volume: per_volume.iter().map(|v| v.iter().map(|x| x.0).collect()).collect(),
    }
}

/// Slice-wise inference settings for a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    pub slice_axis: usize,
    /// Training resolution slices are resized to.
    pub size: usize,
    pub batch_size: usize,
}

/// Argmax over the class axis of a `B×K×H×W` logit tensor, as `B` label maps.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<ndarray::Array2<u8>>> {
    let (b, _, h, w) = logits.dims4()?;
    let idx = logits.argmax(1)?.to_dtype(candle_core::DType::U32)?;
    let flat: Vec<u32> = idx.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| {
            ndarray::Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].iter().map(|&c| c as u8).collect())
                .expect("sized")
        })
        .collect())
}

/// Predict a label volume slice by slice and restack it at native resolution.
pub fn predict_volume(model: &ModelAssembly, v: &VolumeSample, opts: InferenceOptions, device: &Device) -> Result<Array3<u8>> {
    let axis = opts.slice_axis;
    let n = v.voxels.len_of(Axis(axis));
    let mut out = Array3::zeros(v.voxels.raw_dim());
    let s = opts.size;
    let mut start = 0;
    while start < n {
        let end = (start + opts.batch_size.max(1)).min(n);
        let mut data = Vec::with_capacity((end - start) * s * s);
        let mut native = Vec::new();
        for i in start..end {
            let (img, _) = extract_slice(v, axis, i);
            native.push(img.dim());
            data.extend(resize_image(&img, s, s).iter().copied());
        }
        let x = Tensor::from_vec(data, (end - start, 1, s, s), device)?;
        let logits = model.forward(&x, false)?.logits;
        for (j, m) in argmax_masks(&logits)?.into_iter().enumerate() {
            let (h, w) = native[j];
            out.index_axis_mut(Axis(axis), start + j).assign(&resize_mask(&m, h, w));
        }
        start = end;
    }
    Ok(out)
}

/// Predict every volume and score it against its labels with 3-D Dice.
pub fn evaluate_dataset(
    model: &ModelAssembly,
    volumes: &[VolumeSample],
    k: usize,
    inference: InferenceOptions,
    opts: DiceOptions,
    device: &Device,
) -> Result<DatasetDice> {
    check_classes(volumes, k)?;
    let mut per_volume = Vec::with_capacity(volumes.len());
    for v in volumes {
        let pred = predict_volume(model, v, inference, device)?;
        per_volume.push(per_class_dice(pred.view(), v.labels.view(), k)?);
    }
    Ok(aggregate_dice(&per_volume, opts))
}

/// Score given predictions; `preds[i]` pairs with `volumes[i]`.
pub fn evaluate_predictions(
    preds: &[Array3<u8>],
    volumes: &[VolumeSample],
    k: usize,
    opts: DiceOptions,
) -> Result<DatasetDice> {
    check_classes(volumes, k)?;
    let per_volume = preds
        .iter()
        .zip(volumes)
        .map(|(p, v)| per_class_dice(p.view(), v.labels.view(), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_dice(&per_volume, opts))
}

fn check_classes(volumes: &[VolumeSample], k: usize) -> Result<()> {
    for v in volumes {
        let max = v.max_label() as usize;
        if max >= k {
            return Err(Error::ClassMismatch(format!(
                "volume {} contains label {max}, but the model predicts {k} classes",
                v.subject_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};

    #[test]
    fn worked_cases() {
        let a = arr1(&[1u8, 1, 1, 1, 0, 0]);
        let b = arr1(&[1u8, 1, 0, 0, 1, 1]);
        assert_eq!(dice_score(a.view(), b.view(), 1).unwrap(), 0.5);
        assert_eq!(dice_score(a.view(), a.view(), 1).unwrap(), 1.0);
        let c = arr1(&[0u8, 0, 0, 0, 1, 1]);
        let d = arr1(&[1u8, 1, 0, 0, 0, 0]);
        assert_eq!(dice_score(c.view(), d.view(), 1).unwrap(), 0.0);
        assert_eq!(dice_score(c.view(), d.view(), 7).unwrap(), 1.0);
        assert!(dice_score(a.view(), arr1(&[0u8]).view(), 1).is_err());
    }

    #[test]
    fn per_class_matches_single_class() {
        let p = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 3 + x) % 4) as u8);
        let g = Array2::from_shape_fn((5, 7), |(y, x)| ((y + x * 2) % 4) as u8);
        let all = per_class_dice(p.view(), g.view(), 4).unwrap();
        for c in 0..4 {
            assert_eq!(all[c].0, dice_score(p.view(), g.view(), c as u8).unwrap());
        }
    }

    #[test]
    fn background_is_excluded_by_default() {
        let vols = vec![vec![(0.2, false), (1.0, false), (0.5, false)]];
        let d = aggregate_dice(&vols, DiceOptions::default());
        assert_eq!(d.mean, 0.75);
        let d = aggregate_dice(&vols, DiceOptions { include_background: true, skip_both_empty: false });
        assert!((d.mean - 1.7 / 3.0).abs() < 1e-12);
        let vols = vec![vec![(1.0, false), (1.0, true), (0.5, false)]];
        let d = aggregate_dice(&vols, DiceOptions { include_background: false, skip_both_empty: true });
        assert_eq!(d.mean, 0.5);
    }
}
