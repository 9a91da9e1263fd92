//! Paired image/mask augmentation: photometric jitter, elastic and affine warps.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SliceBatch;
use crate::exec::Exec;
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub photometric_p: f64,
    pub elastic_p: f64,
    pub affine_p: f64,
    /// Multiplicative brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation drawn from `± hue` turns.
    pub hue: f64,
    /// Control points per side of the elastic displacement grid.
    pub elastic_grid: usize,
    /// Maximum control-point displacement as a fraction of the image side.
    pub elastic_magnitude: f64,
    pub rotation_deg: f64,
    /// Maximum translation as a fraction of the image side.
    pub translation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            photometric_p: 0.5,
            elastic_p: 0.25,
            affine_p: 0.25,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            elastic_grid: 4,
            elastic_magnitude: 0.03,
            rotation_deg: 15.0,
            translation: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugmentationSpec {
    /// Spec that leaves every batch unchanged.
    pub fn none() -> Self {
        Self {
            photometric_p: 0.0,
            elastic_p: 0.0,
            affine_p: 0.0,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, p) in [
            ("photometric_p", self.photometric_p),
            ("elastic_p", self.elastic_p),
            ("affine_p", self.affine_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("augmentation.{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("elastic_magnitude", self.elastic_magnitude),
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("augmentation.{name} must be non-negative, got {v}"));
            }
        }
        if self.brightness >= 1.0 || self.contrast >= 1.0 || self.saturation >= 1.0 {
            errs.push("augmentation brightness/contrast/saturation must be < 1".into());
        }
        if self.hue > 0.5 {
            errs.push(format!("augmentation.hue must be ≤ 0.5, got {}", self.hue));
        }
        if self.elastic_grid < 2 {
            errs.push("augmentation.elastic_grid must be ≥ 2".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            errs.push(format!(
                "augmentation scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub angle_rad: f64,
    pub scale: f64,
    /// Translation as fractions of (height, width).
    pub shift: (f64, f64),
}

/// The transforms drawn for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugPlan {
    pub photometric: Option<Photometric>,
    /// Control-grid displacements in pixels-per-side fractions, `[2][g][g]`.
    pub elastic: Option<Vec<f64>>,
    pub affine: Option<Affine>,
}

fn sym(rng: &mut impl Rng, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.random_range(-r..=r)
    }
}

/// Draw the transforms for one image. The three gate draws always happen, so
/// the gates are independent of the magnitude parameters.
pub fn plan_augmentation(spec: &AugmentationSpec, rng: &mut impl Rng) -> AugPlan {
    let gates: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut plan = AugPlan::default();
    if gates[0] < spec.photometric_p {
        plan.photometric = Some(Photometric {
            brightness: 1.0 + sym(rng, spec.brightness),
            contrast: 1.0 + sym(rng, spec.contrast),
            saturation: 1.0 + sym(rng, spec.saturation),
            hue: sym(rng, spec.hue),
        });
    }
    if gates[1] < spec.elastic_p {
        let g = spec.elastic_grid;
        plan.elastic = Some((0..2 * g * g).map(|_| sym(rng, spec.elastic_magnitude)).collect());
    }
    if gates[2] < spec.affine_p {
        let scale = if spec.scale_max > spec.scale_min {
            rng.random_range(spec.scale_min..=spec.scale_max)
        } else {
            spec.scale_min
        };
        plan.affine = Some(Affine {
            angle_rad: sym(rng, spec.rotation_deg).to_radians(),
            scale,
            shift: (sym(rng, spec.translation), sym(rng, spec.translation)),
        });
    }
    plan
}

/// Jitter in RGB space on the replicated gray channel, then back to gray by channel mean.
fn photometric(img: &mut Array2<f32>, p: &Photometric) {
    let mean = img.iter().map(|&x| x as f64).sum::<f64>() / img.len().max(1) as f64;
    let (cos, sin) = ((p.hue * std::f64::consts::TAU).cos(), (p.hue * std::f64::consts::TAU).sin());
    // Hue rotation about the gray axis.
    let k = (1.0 - cos) / 3.0;
    let s3 = sin / 3f64.sqrt();
    let rot = [
        [cos + k, k - s3, k + s3],
        [k + s3, cos + k, k - s3],
        [k - s3, k + s3, cos + k],
    ];
    for x in img.iter_mut() {
        let g = *x as f64 * p.brightness;
        let g = (g - mean * p.brightness) * p.contrast + mean * p.brightness;
        let rgb = [g, g, g];
        let lum = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        let sat: Vec<f64> = rgb.iter().map(|c| lum + (c - lum) * p.saturation).collect();
        let out: f64 = (0..3)
            .map(|r| (0..3).map(|c| rot[r][c] * sat[c]).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        *x = out as f32;
    }
}

fn sample_bilinear(img: ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[[y0, x0]] * (1.0 - tx) + img[[y0, x1]] * tx;
    let bot = img[[y1, x0]] * (1.0 - tx) + img[[y1, x1]] * tx;
    top * (1.0 - ty) + bot * ty
}

fn sample_nearest(mask: ArrayView2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = mask.dim();
    let yi = y.round().clamp(0.0, (h - 1) as f64) as usize;
    let xi = x.round().clamp(0.0, (w - 1) as f64) as usize;
    mask[[yi, xi]]
}

/// Warp image (bilinear) and mask (nearest) by a source-coordinate map.
fn warp(img: &Array2<f32>, mask: &Array2<u8>, src: impl Fn(usize, usize) -> (f64, f64)) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = img.dim();
    let mut oi = Array2::zeros((h, w));
    let mut om = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            oi[[y, x]] = sample_bilinear(img.view(), sy, sx);
            om[[y, x]] = sample_nearest(mask.view(), sy, sx);
        }
    }
    (oi, om)
}

/// Bilinear upsampling of a g×g control grid to pixel (y, x), corners aligned.
fn grid_value(grid: &[f64], g: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let gy = if h > 1 { y as f64 * (g - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let gx = if w > 1 { x as f64 * (g - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
    let (ty, tx) = (gy - y0 as f64, gx - x0 as f64);
    let at = |a: usize, b: usize| grid[a * g + b];
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Apply a plan to one image/mask pair.
pub fn apply_plan(plan: &AugPlan, img: &Array2<f32>, mask: &Array2<u8>) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = img.dim();
    let mut img = img.clone();
    let mut mask = mask.clone();
    if let Some(p) = &plan.photometric {
        photometric(&mut img, p);
    }
    if let Some(d) = &plan.elastic {
        let g = ((d.len() / 2) as f64).sqrt() as usize;
        let (dy, dx) = d.split_at(g * g);
        (img, mask) = warp(&img, &mask, |y, x| {
            (
                y as f64 + grid_value(dy, g, y, x, h, w) * h as f64,
                x as f64 + grid_value(dx, g, y, x, h, w) * w as f64,
            )
        });
    }
    if let Some(a) = &plan.affine {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ty, tx) = (a.shift.0 * h as f64, a.shift.1 * w as f64);
        let (c, s) = (a.angle_rad.cos(), a.angle_rad.sin());
        (img, mask) = warp(&img, &mask, |y, x| {
            let (py, px) = (y as f64 - cy - ty, x as f64 - cx - tx);
            // Inverse rotation and scale.
            let sy = (c * py - s * px) / a.scale;
            let sx = (s * py + c * px) / a.scale;
            (sy + cy, sx + cx)
        });
    }
    (img, mask)
}

/// Augment every image of a batch independently; image `i` draws from `seeds.index(i)`.
pub fn augment_batch(batch: &SliceBatch, spec: &AugmentationSpec, seeds: SeedTree) -> SliceBatch {
    augment_batch_with(batch, spec, seeds, Exec::default())
}

pub fn augment_batch_with(batch: &SliceBatch, spec: &AugmentationSpec, seeds: SeedTree, exec: Exec) -> SliceBatch {
    let (b, c, h, w) = batch.images.dim();
    let out = exec.map_range(b, |i| {
        let mut rng = seeds.index(i as u64).rng();
        let plan = plan_augmentation(spec, &mut rng);
        let img = batch.images.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned();
        let mask = batch.masks.index_axis(Axis(0), i).to_owned();
        apply_plan(&plan, &img, &mask)
    });
    let mut images = Array4::zeros((b, c, h, w));
    let mut masks = Array3::zeros((b, h, w));
    for (i, (img, mask)) in out.into_iter().enumerate() {
        for ch in 0..c {
            images.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), ch).assign(&img);
        }
        masks.index_axis_mut(Axis(0), i).assign(&mask);
    }
    SliceBatch {
        images,
        masks,
        provenance: batch.provenance.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn batch(seed: u64) -> SliceBatch {
        let mut rng = SeedTree::new(seed).rng();
        let images = Array4::from_shape_fn((4, 1, 24, 20), |_| rng.random::<f32>());
        let masks = Array3::from_shape_fn((4, 24, 20), |(_, y, x)| ((y / 6 + x / 7) % 3) as u8 * 2);
        SliceBatch {
            images,
            masks,
            provenance: (0..4).map(|i| ("s".to_string(), i)).collect(),
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let b = batch(0);
        assert_eq!(augment_batch(&b, &AugmentationSpec::none(), SeedTree::new(1)), b);
    }

    #[test]
    fn geometric_warps_keep_label_set() {
        let b = batch(1);
        let spec = AugmentationSpec {
            photometric_p: 1.0,
            elastic_p: 1.0,
            affine_p: 1.0,
            elastic_magnitude: 0.2,
            ..AugmentationSpec::default()
        };
        let before = b.clone();
        let out = augment_batch(&b, &spec, SeedTree::new(2));
        assert_eq!(b, before);
        let input: BTreeSet<u8> = b.masks.iter().copied().collect();
        let output: BTreeSet<u8> = out.masks.iter().copied().collect();
        assert!(output.is_subset(&input));
        assert_ne!(out.images, b.images);
    }

    #[test]
    fn gray_photometric_only_rescales() {
        let mut img = Array2::from_shape_fn((3, 3), |(y, x)| (y * 3 + x) as f32);
        let orig = img.clone();
        photometric(
            &mut img,
            &Photometric { brightness: 1.0, contrast: 1.0, saturation: 1.3, hue: 0.1 },
        );
        for (a, b) in img.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let b = batch(3);
        let spec = AugmentationSpec { elastic_p: 1.0, ..AugmentationSpec::default() };
        let s = augment_batch_with(&b, &spec, SeedTree::new(4), Exec::Sequential);
        let p = augment_batch_with(&b, &spec, SeedTree::new(4), Exec::Parallel);
        assert_eq!(s, p);
    }

    #[test]
    fn invalid_probabilities_are_reported() {
        let spec = AugmentationSpec { elastic_p: 1.5, affine_p: -0.1, ..AugmentationSpec::default() };
        assert_eq!(spec.check().len(), 2);
    }
}
