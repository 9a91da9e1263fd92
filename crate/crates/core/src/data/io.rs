//! Volume file formats and dataset manifests.
//!
//! Internal format: `<name>.raw` (little-endian f32, C-order D×H×W),
//! `<name>.json` sidecar and `<name>.seg.raw` (u8 labels).
//! NIfTI-1 single-file (`.nii`) volumes are read and written uncompressed;
//! the NIfTI x axis maps to W, y to H and z to D.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{LabelMap, VolumeSample};
use crate::error::{Error, Result};

const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    schema_version: u32,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dataset_id: String,
    subject_id: String,
    labels: PathBuf,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn strip_json(path: &Path) -> PathBuf {
    path.with_extension("")
}

/// Write `<stem>.raw`, `<stem>.seg.raw` and `<stem>.json`; returns the sidecar path.
pub fn write_internal(v: &VolumeSample, stem: &Path) -> Result<PathBuf> {
    let raw = stem.with_extension("raw");
    let seg = stem.with_extension("seg.raw");
    let json = stem.with_extension("json");
    let bytes: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write(&raw, &bytes)?;
    let labels: Vec<u8> = v.labels.iter().copied().collect();
    write(&seg, &labels)?;
    let sidecar = Sidecar {
        schema_version: SIDECAR_VERSION,
        shape: v.shape(),
        spacing_mm: v.spacing_mm,
        dataset_id: v.dataset_id.clone(),
        subject_id: v.subject_id.clone(),
        labels: PathBuf::from(seg.file_name().expect("stem has a file name")),
    };
    write(&json, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(json)
}

/// Read an internal-format volume from its JSON sidecar.
pub fn read_internal(json: &Path) -> Result<VolumeSample> {
    let sidecar: Sidecar = serde_json::from_slice(&read(json)?)
        .map_err(|e| Error::Data(format!("{}: malformed sidecar: {e}", json.display())))?;
    if sidecar.schema_version != SIDECAR_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported sidecar schema_version {}",
            json.display(),
            sidecar.schema_version
        )));
    }
    let [d, h, w] = sidecar.shape;
    let n = d * h * w;
    let raw_path = strip_json(json).with_extension("raw");
    let raw = read(&raw_path)?;
    if raw.len() != 4 * n {
        return Err(Error::Data(format!(
            "{}: {} bytes for shape {:?}, expected {}",
            raw_path.display(),
            raw.len(),
            sidecar.shape,
            4 * n
        )));
    }
    let voxels: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let seg_path = json.parent().unwrap_or(Path::new(".")).join(&sidecar.labels);
    let seg = read(&seg_path)?;
    if seg.len() % (h * w).max(1) != 0 || seg.len() != n {
        let depth = seg.len() / (h * w).max(1);
        return Err(Error::Data(format!(
            "image shape {:?} does not match label shape {:?} ({})",
            sidecar.shape,
            [depth, h, w],
            seg_path.display()
        )));
    }
    VolumeSample::new(
        Array3::from_shape_vec((d, h, w), voxels).expect("length checked"),
        Array3::from_shape_vec((d, h, w), seg).expect("length checked"),
        sidecar.spacing_mm,
        sidecar.dataset_id,
        sidecar.subject_id,
    )
}

/// Header fields of a NIfTI-1 file that ingestion honours.
#[derive(Debug, Clone, PartialEq)]
struct NiftiHeader {
    dims: [usize; 3],
    pixdim: [f64; 3],
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    little_endian: bool,
}

fn parse_nifti_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    let bad = |m: String| Error::Data(format!("{}: malformed NIfTI header: {m}", path.display()));
    if bytes.len() < 348 {
        return Err(bad(format!("{} bytes, need at least 348", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348;
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348;
    if !le && !be {
        return Err(bad("sizeof_hdr is not 348".into()));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(bad("magic is not n+1 (only single-file NIfTI-1 is supported)".into()));
    }
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let ndim = i16_at(40);
    if !(3..=7).contains(&ndim) {
        return Err(bad(format!("dim[0] = {ndim}, expected a 3-D volume")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = i16_at(42 + 2 * i);
        if v < 1 {
            return Err(bad(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    for i in 4..=ndim as usize {
        if i16_at(40 + 2 * i) > 1 {
            return Err(bad("4-D volumes are not supported".into()));
        }
    }
    let mut pixdim = [0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(80 + 4 * i).abs() as f64;
    }
    let vox_offset = f32_at(108);
    if vox_offset < 348.0 {
        return Err(bad(format!("vox_offset {vox_offset} < 348")));
    }
    let slope = f32_at(112) as f64;
    Ok(NiftiHeader {
        dims,
        pixdim,
        datatype: i16_at(70),
        vox_offset: vox_offset as usize,
        slope: if slope == 0.0 || !slope.is_finite() { 1.0 } else { slope },
        inter: f32_at(116) as f64,
        little_endian: le,
    })
}

fn decode_nifti_data(h: &NiftiHeader, bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    let n = h.dims.iter().product::<usize>();
    let width = match h.datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        t => {
            return Err(Error::Data(format!(
                "{}: unsupported NIfTI datatype {t}",
                path.display()
            )))
        }
    };
    let data = bytes.get(h.vox_offset..h.vox_offset + n * width).ok_or_else(|| {
        Error::Data(format!(
            "{}: voxel block truncated ({} bytes, need {})",
            path.display(),
            bytes.len(),
            h.vox_offset + n * width
        ))
    })?;
    let le = h.little_endian;
    macro_rules! conv {
        ($t:ty, $w:expr) => {
            data.chunks_exact($w)
                .map(|c| {
                    let b = c.try_into().unwrap();
                    (if le { <$t>::from_le_bytes(b) } else { <$t>::from_be_bytes(b) }) as f64
                })
                .collect()
        };
    }
    let raw: Vec<f64> = match h.datatype {
        2 => data.iter().map(|&b| b as f64).collect(),
        256 => data.iter().map(|&b| b as i8 as f64).collect(),
        4 => conv!(i16, 2),
        512 => conv!(u16, 2),
        8 => conv!(i32, 4),
        768 => conv!(u32, 4),
        16 => conv!(f32, 4),
        _ => conv!(f64, 8),
    };
    Ok(raw.into_iter().map(|x| x * h.slope + h.inter).collect())
}

fn nifti_array(path: &Path) -> Result<(Array3<f64>, [f64; 3])> {
    let bytes = read(path)?;
    let h = parse_nifti_header(&bytes, path)?;
    let data = decode_nifti_data(&h, &bytes, path)?;
    let [x, y, z] = h.dims;
    let arr = Array3::from_shape_vec((z, y, x), data).expect("length checked");
    Ok((arr, [h.pixdim[2], h.pixdim[1], h.pixdim[0]]))
}

/// Read an image and its label volume from NIfTI-1 files.
pub fn read_nifti(image: &Path, labels: &Path, dataset_id: &str) -> Result<VolumeSample> {
    let (img, spacing) = nifti_array(image)?;
    let (seg, _) = nifti_array(labels)?;
    if img.dim() != seg.dim() {
        return Err(Error::Data(format!(
            "image shape {:?} does not match label shape {:?}",
            img.shape(),
            seg.shape()
        )));
    }
    if let Some(bad) = seg.iter().find(|v| !(**v >= 0.0 && **v <= 255.0 && v.fract() == 0.0)) {
        return Err(Error::Data(format!(
            "{}: label value {bad} is not a class id",
            labels.display()
        )));
    }
    let subject = image
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    VolumeSample::new(
        img.mapv(|v| v as f32),
        seg.mapv(|v| v as u8),
        spacing,
        dataset_id,
        subject,
    )
}

fn nifti_bytes(dims: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16, data: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(data);
    h
}

/// Write a volume as `<stem>.nii` (f32) and `<stem>.seg.nii` (u8); returns both paths.
pub fn write_nifti(v: &VolumeSample, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let [d, h, w] = v.shape();
    if [d, h, w].iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::Data(format!("shape {:?} exceeds NIfTI-1 limits", v.shape())));
    }
    let dims = [w, h, d];
    let spacing = [v.spacing_mm[2], v.spacing_mm[1], v.spacing_mm[0]];
    let img_path = stem.with_extension("nii");
    let seg_path = stem.with_extension("seg.nii");
    let img: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write(&img_path, &nifti_bytes(dims, spacing, 16, 32, &img))?;
    let seg: Vec<u8> = v.labels.iter().copied().collect();
    write(&seg_path, &nifti_bytes(dims, spacing, 2, 8, &seg))?;
    Ok((img_path, seg_path))
}

/// Load a volume from an internal-format sidecar (`.json`) or a NIfTI image
/// (`.nii`, labels in the sibling `.seg.nii`).
pub fn load_volume(path: &Path) -> Result<VolumeSample> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") {
        let stem = name.trim_end_matches(".nii");
        let labels = path.with_file_name(format!("{stem}.seg.nii"));
        let dataset = path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .unwrap_or("");
        return read_nifti(path, &labels, dataset);
    }
    if name.ends_with(".json") {
        return read_internal(path);
    }
    Err(Error::Data(format!(
        "{}: unrecognised volume format (expected .json sidecar or .nii)",
        path.display()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Volumes per split for one dataset. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    pub classes: Vec<String>,
    /// Target spacing applied at load time, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_spacing_mm: Option<[f64; 3]>,
    pub splits: BTreeMap<Split, Vec<PathBuf>>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let mut m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))?;
        m.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        LabelMap::new(m.classes.clone())?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap {
            classes: self.classes.clone(),
        }
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.splits
            .get(&split)
            .map(|v| v.iter().map(|p| self.root.join(p)).collect())
            .unwrap_or_default()
    }

    /// Load every volume of a split, checking labels against the class list.
    pub fn load_split(&self, split: Split) -> Result<Vec<VolumeSample>> {
        let k = self.classes.len();
        self.paths(split)
            .iter()
            .map(|p| {
                let mut v = load_volume(p)?;
                if let Some(t) = self.target_spacing_mm {
                    v = super::resample_volume(&v, t)?;
                }
                if v.max_label() as usize >= k {
                    return Err(Error::ClassMismatch(format!(
                        "{}: label {} present but dataset `{}` declares {k} classes",
                        p.display(),
                        v.max_label(),
                        self.dataset_id
                    )));
                }
                Ok(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VolumeSample {
        let vox = Array3::from_shape_fn((3, 4, 5), |(d, h, w)| (d * 100 + h * 10 + w) as f32 * 0.5 - 3.0);
        let lab = Array3::from_shape_fn((3, 4, 5), |(d, h, w)| ((d + h + w) % 3) as u8);
        VolumeSample::new(vox, lab, [2.0, 0.7, 0.625], "ds", "s01").unwrap()
    }

    #[test]
    fn internal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let json = write_internal(&v, &dir.path().join("s01")).unwrap();
        assert_eq!(load_volume(&json).unwrap(), v);
    }

    #[test]
    fn internal_shape_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let json = write_internal(&sample(), &dir.path().join("s01")).unwrap();
        let seg = dir.path().join("s01.seg.raw");
        let bytes = fs::read(&seg).unwrap();
        fs::write(&seg, &bytes[..40]).unwrap();
        let msg = read_internal(&json).unwrap_err().to_string();
        assert!(msg.contains("[3, 4, 5]") && msg.contains("[2, 4, 5]"), "{msg}");
    }

    #[test]
    fn nifti_round_trip_is_voxel_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let (img, seg) = write_nifti(&v, &dir.path().join("s01")).unwrap();
        let back = read_nifti(&img, &seg, "ds").unwrap();
        assert_eq!(back.voxels, v.voxels);
        assert_eq!(back.labels, v.labels);
        for (a, b) in back.spacing_mm.iter().zip(v.spacing_mm) {
            assert!((a - b).abs() < 1e-6);
        }
        let again = load_volume(&img).unwrap();
        assert_eq!(again.voxels, v.voxels);
    }

    #[test]
    fn nifti_scaling_and_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = nifti_bytes([2, 1, 1], [1.0, 1.0, 1.0], 4, 16, &[]);
        h[112..116].copy_from_slice(&2f32.to_le_bytes());
        h[116..120].copy_from_slice(&10f32.to_le_bytes());
        h.extend_from_slice(&3i16.to_le_bytes());
        h.extend_from_slice(&(-1i16).to_le_bytes());
        let p = dir.path().join("a.nii");
        fs::write(&p, &h).unwrap();
        let (arr, _) = nifti_array(&p).unwrap();
        assert_eq!(arr.iter().copied().collect::<Vec<_>>(), vec![16.0, 8.0]);

        let mut be = vec![0u8; 352];
        be[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 1, 1, 1].iter().enumerate() {
            be[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        be[70..72].copy_from_slice(&16i16.to_be_bytes());
        be[108..112].copy_from_slice(&352f32.to_be_bytes());
        be[344..348].copy_from_slice(b"n+1\0");
        be.extend_from_slice(&1.5f32.to_be_bytes());
        let p = dir.path().join("b.nii");
        fs::write(&p, &be).unwrap();
        let (arr, _) = nifti_array(&p).unwrap();
        assert_eq!(arr[[0, 0, 0]], 1.5);
    }

    #[test]
    fn malformed_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nii");
        fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(nifti_array(&p).unwrap_err().to_string().contains("malformed NIfTI header"));
    }
}
