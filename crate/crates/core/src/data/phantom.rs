//! Synthetic phantom volumes with an intensity-only domain shift.
//!
//! Label geometry depends only on the seed and the subject index. The domain
//! shift (gamma, contrast, noise, multiplicative bias field) touches voxel
//! intensities and never the labels, so a shifted copy of a dataset has the
//! same ground truth as its source.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_internal, DatasetManifest, Split};
use super::{LabelMap, VolumeSample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub gamma: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Peak relative amplitude of the multiplicative bias field.
    pub bias_strength: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            bias_strength: 0.0,
        }
    }
}

impl DomainShift {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// D×H×W.
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Classes including background; one blob per foreground class.
    pub num_classes: usize,
    pub domain_shift: DomainShift,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            num_train: 20,
            num_val: 4,
            num_test: 4,
            shape: [12, 64, 64],
            spacing_mm: [1.0, 1.0, 1.0],
            num_classes: 4,
            domain_shift: DomainShift::default(),
        }
    }
}

impl PhantomSpec {
    pub fn total(&self) -> usize {
        self.num_train + self.num_val + self.num_test
    }

    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(2..=16).contains(&self.num_classes) {
            errs.push(format!("num_classes must be in 2..=16, got {}", self.num_classes));
        }
        if self.shape[0] < 1 || self.shape[1] < 16 || self.shape[2] < 16 {
            errs.push(format!("shape {:?} too small (need D ≥ 1, H, W ≥ 16)", self.shape));
        }
        let s = &self.domain_shift;
        if !(s.gamma > 0.0 && s.contrast > 0.0 && s.noise_sigma >= 0.0 && (0.0..1.0).contains(&s.bias_strength)) {
            errs.push(format!("invalid domain shift {s:?}"));
        }
        if self.total() == 0 {
            errs.push("phantom dataset needs at least one subject".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.num_train {
            Split::Train
        } else if i < self.num_train + self.num_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Mean intensity of class `k`; 0 is background tissue.
fn class_intensity(k: usize, num_classes: usize) -> f64 {
    if k == 0 {
        0.2
    } else {
        0.4 + 0.55 * k as f64 / (num_classes - 1) as f64
    }
}

struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
    lobes: f64,
    phase: f64,
    wobble: f64,
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            (p[0] - self.centre[0]) / self.radii[0],
            (p[1] - self.centre[1]) / self.radii[1],
            (p[2] - self.centre[2]) / self.radii[2],
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let theta = d[1].atan2(d[2]);
        r <= 1.0 + self.wobble * (self.lobes * theta + self.phase).sin()
    }
}

fn geometry(spec: &PhantomSpec, seeds: SeedTree) -> Array3<u8> {
    let mut rng = seeds.child("geometry").rng();
    let [d, h, w] = spec.shape;
    let (fd, fh, fw) = (d as f64, h as f64, w as f64);
    let fg = spec.num_classes - 1;
    let rot0 = rng.random_range(0.0..TAU);
    let ring = rng.random_range(0.2..0.26);
    let blobs: Vec<Blob> = (0..fg)
        .map(|k| {
            let angle = rot0 + TAU * k as f64 / fg as f64;
            let ring = if fg == 1 { 0.0 } else { ring };
            let rmax = if fg == 1 { 0.25 } else { (0.8 * ring * (TAU / fg as f64 / 2.0).sin()).min(0.16) };
            Blob {
                centre: [
                    fd / 2.0 + rng.random_range(-0.1..0.1) * fd,
                    fh / 2.0 + ring * fh * angle.sin(),
                    fw / 2.0 + ring * fw * angle.cos(),
                ],
                radii: [
                    (fd * rng.random_range(0.35..0.6)).max(0.8),
                    fh * rmax * rng.random_range(0.75..1.0),
                    fw * rmax * rng.random_range(0.75..1.0),
                ],
                lobes: rng.random_range(2..5) as f64,
                phase: rng.random_range(0.0..TAU),
                wobble: rng.random_range(0.05..0.15),
            }
        })
        .collect();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
        blobs
            .iter()
            .enumerate()
            .rev()
            .find(|(_, b)| b.contains(p))
            .map(|(k, _)| k as u8 + 1)
            .unwrap_or(0)
    })
}

/// Smooth low-frequency field in roughly [-1, 1].
fn smooth_field(rng: &mut impl Rng, shape: [usize; 3]) -> impl Fn(usize, usize, usize) -> f64 {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            (
                [
                    rng.random_range(0.0..1.0) / shape[0].max(1) as f64,
                    rng.random_range(0.3..1.5) / shape[1] as f64,
                    rng.random_range(0.3..1.5) / shape[2] as f64,
                ],
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    move |z, y, x| {
        waves
            .iter()
            .map(|(f, ph)| (TAU * (f[0] * z as f64 + f[1] * y as f64 + f[2] * x as f64) + ph).sin())
            .sum::<f64>()
            / 3.0
    }
}

fn subject(spec: &PhantomSpec, seeds: SeedTree, dataset_id: &str, index: usize) -> VolumeSample {
    let labels = geometry(spec, seeds);
    let [d, h, w] = spec.shape;
    let mut rng = seeds.child("intensity").rng();
    let texture = smooth_field(&mut rng, spec.shape);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ry, rx) = (0.45 * h as f64, 0.45 * w as f64);
    let mut voxels = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let k = labels[[z, y, x]] as usize;
        let inside = ((y as f64 + 0.5 - cy) / ry).powi(2) + ((x as f64 + 0.5 - cx) / rx).powi(2) <= 1.0;
        let base = if k == 0 && !inside { 0.0 } else { class_intensity(k, spec.num_classes) };
        let v = base + 0.03 * texture(z, y, x) + noise.sample(&mut rng);
        v.max(0.0) as f32
    });
    let shift = &spec.domain_shift;
    if !shift.is_identity() {
        let mut rng = seeds.child("shift").rng();
        let bias = smooth_field(&mut rng, spec.shape);
        let noise = Normal::new(0.0, shift.noise_sigma.max(0.0)).expect("valid sigma");
        for ((z, y, x), v) in voxels.indexed_iter_mut() {
            let mut s = (*v as f64).powf(shift.gamma) * shift.contrast;
            s *= 1.0 + shift.bias_strength * bias(z, y, x);
            if shift.noise_sigma > 0.0 {
                s += noise.sample(&mut rng);
            }
            *v = s as f32;
        }
    }
    VolumeSample {
        voxels,
        labels,
        spacing_mm: spec.spacing_mm,
        dataset_id: dataset_id.to_string(),
        subject_id: format!("sub-{index:03}"),
    }
}

/// Generate `spec.total()` subjects, ordered train, val, test.
pub fn generate_phantom_dataset(spec: &PhantomSpec, seed: u64) -> Result<Vec<VolumeSample>> {
    generate_phantom_dataset_with(spec, seed, "phantom", Exec::default())
}

pub fn generate_phantom_dataset_with(
    spec: &PhantomSpec,
    seed: u64,
    dataset_id: &str,
    exec: Exec,
) -> Result<Vec<VolumeSample>> {
    spec.check()?;
    let root = SeedTree::new(seed).child("phantom");
    Ok(exec.map_range(spec.total(), |i| subject(spec, root.index(i as u64), dataset_id, i)))
}

/// Generate and write a dataset in the internal format with its manifest;
/// returns the manifest path.
pub fn write_phantom_dataset(spec: &PhantomSpec, seed: u64, dataset_id: &str, dir: &Path) -> Result<PathBuf> {
    let volumes = generate_phantom_dataset_with(spec, seed, dataset_id, Exec::default())?;
    let mut splits: BTreeMap<Split, Vec<PathBuf>> = BTreeMap::new();
    for (i, v) in volumes.iter().enumerate() {
        let json = write_internal(v, &dir.join(&v.subject_id))?;
        let rel = PathBuf::from(json.file_name().expect("file name"));
        splits.entry(spec.split_of(i)).or_default().push(rel);
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        dataset_id: dataset_id.to_string(),
        classes: LabelMap::generic(spec.num_classes).classes,
        target_spacing_mm: None,
        splits,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small(k: usize) -> PhantomSpec {
        PhantomSpec {
            num_train: 2,
            num_val: 1,
            num_test: 0,
            shape: [6, 32, 32],
            num_classes: k,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom_dataset(&small(4), 5).unwrap();
        let b = generate_phantom_dataset(&small(4), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_dataset(&small(4), 6).unwrap();
        assert_ne!(a[0].voxels, c[0].voxels);
    }

    #[test]
    fn shift_is_intensity_only() {
        let src = generate_phantom_dataset(&small(3), 9).unwrap();
        let mut spec = small(3);
        spec.domain_shift = DomainShift {
            gamma: 2.0,
            contrast: 1.2,
            noise_sigma: 0.1,
            bias_strength: 0.3,
        };
        let tgt = generate_phantom_dataset(&spec, 9).unwrap();
        for (s, t) in src.iter().zip(&tgt) {
            assert_eq!(s.labels, t.labels);
            assert_ne!(s.voxels, t.voxels);
        }
    }

    #[test]
    fn every_class_present() {
        for v in generate_phantom_dataset(&small(4), 1).unwrap() {
            let set: BTreeSet<u8> = v.labels.iter().copied().collect();
            assert_eq!(set, BTreeSet::from([0, 1, 2, 3]));
        }
    }

    #[test]
    fn sequential_equals_parallel() {
        let s = generate_phantom_dataset_with(&small(3), 2, "x", Exec::Sequential).unwrap();
        let p = generate_phantom_dataset_with(&small(3), 2, "x", Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_phantom_dataset(&small(3), 4, "ph", dir.path()).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.load_split(Split::Train).unwrap().len(), 2);
        assert_eq!(m.load_split(Split::Val).unwrap().len(), 1);
        assert!(m.load_split(Split::Test).unwrap().is_empty());
    }
}
