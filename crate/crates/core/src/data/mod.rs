//! Volumes, preprocessing, slice batches, augmentation and synthetic phantoms.

mod augment;
mod io;
mod phantom;
mod pipeline;
mod preprocess;
mod slices;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{apply_plan, augment_batch, augment_batch_with, plan_augmentation, AugPlan, AugmentationSpec};
pub use io::{
    load_volume, read_internal, read_nifti, write_internal, write_nifti, DatasetManifest, Split,
};
pub use phantom::{
    generate_phantom_dataset, generate_phantom_dataset_with, write_phantom_dataset, DomainShift,
    PhantomSpec,
};
pub use pipeline::{load_prepared, prepare_volume, Normalization};
pub use preprocess::{
    normalize_percentile, normalize_znorm_minmax, percentile, resample_volume,
    resample_volume_with, NormMode, NormalizationParams,
};
pub use slices::{
    extract_slice, prepare_slice, resize_image, resize_mask, slice_iterator, SliceIterator, SliceSet,
};

/// Ordered class names; class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub classes: Vec<String>,
}

impl LabelMap {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Data(format!(
                "a label map needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        Ok(Self { classes })
    }

    /// `background, class_1, ..., class_{k-1}`.
    pub fn generic(k: usize) -> Self {
        let mut classes = vec!["background".to_string()];
        classes.extend((1..k).map(|i| format!("class_{i}")));
        Self { classes }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// D×H×W intensities.
    pub voxels: Array3<f32>,
    /// D×H×W class ids.
    pub labels: Array3<u8>,
    pub spacing_mm: [f64; 3],
    pub dataset_id: String,
    pub subject_id: String,
}

impl VolumeSample {
    pub fn new(
        voxels: Array3<f32>,
        labels: Array3<u8>,
        spacing_mm: [f64; 3],
        dataset_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if voxels.dim() != labels.dim() {
            return Err(Error::Data(format!(
                "image shape {:?} does not match label shape {:?}",
                voxels.shape(),
                labels.shape()
            )));
        }
        if spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        Ok(Self {
            voxels,
            labels,
            spacing_mm,
            dataset_id: dataset_id.into(),
            subject_id: subject_id.into(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.voxels.dim();
        [d, h, w]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Provenance of one slice: subject and slice index.
pub type SliceRef = (String, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    /// B×1×H×W.
    pub images: Array4<f32>,
    /// B×H×W.
    pub masks: Array3<u8>,
    pub provenance: Vec<SliceRef>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}
