//! 2-D slice extraction, resizing and batching.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;

use super::preprocess::axis_len;
use super::{SliceBatch, SliceRef, VolumeSample};
use crate::exec::Exec;
use crate::seed::SeedTree;

/// Image and mask of slice `index` along `axis`.
pub fn extract_slice(v: &VolumeSample, axis: usize, index: usize) -> (Array2<f32>, Array2<u8>) {
    (
        v.voxels.index_axis(Axis(axis), index).to_owned(),
        v.labels.index_axis(Axis(axis), index).to_owned(),
    )
}

fn src_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Bilinear resize with half-pixel centres.
pub fn resize_image(img: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (ih, iw) = img.dim();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let ys: Vec<_> = (0..h).map(|y| src_coord(y, ih, h)).collect();
    let xs: Vec<_> = (0..w).map(|x| src_coord(x, iw, w)).collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = (ys[y], xs[x]);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
        let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let top = img[[y0, x0]] * (1.0 - tx) + img[[y0, x1]] * tx;
        let bot = img[[y1, x0]] * (1.0 - tx) + img[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Nearest-neighbour resize for label maps.
pub fn resize_mask(mask: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (ih, iw) = mask.dim();
    if (ih, iw) == (h, w) {
        return mask.clone();
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * ih as f64 / h as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * iw as f64 / w as f64).floor() as usize;
        mask[[sy.min(ih - 1), sx.min(iw - 1)]]
    })
}

/// Resize an image/mask pair to `size`×`size`.
pub fn prepare_slice(img: &Array2<f32>, mask: &Array2<u8>, size: usize) -> (Array2<f32>, Array2<u8>) {
    (resize_image(img, size, size), resize_mask(mask, size, size))
}

/// Every slice of a set of volumes, resized once.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub images: Vec<Array2<f32>>,
    pub masks: Vec<Array2<u8>>,
    pub refs: Vec<SliceRef>,
    pub size: usize,
}

impl SliceSet {
    /// Slices in (subject, slice) order.
    pub fn from_volumes(volumes: &[VolumeSample], axis: usize, size: usize, exec: Exec) -> Self {
        let jobs: Vec<(usize, usize)> = volumes
            .iter()
            .enumerate()
            .flat_map(|(v, vol)| (0..axis_len(vol, axis)).map(move |i| (v, i)))
            .collect();
        let prepared = exec.map(&jobs, |&(v, i)| {
            let (img, mask) = extract_slice(&volumes[v], axis, i);
            prepare_slice(&img, &mask, size)
        });
        let (images, masks) = prepared.into_iter().unzip();
        Self {
            images,
            masks,
            refs: jobs
                .iter()
                .map(|&(v, i)| (volumes[v].subject_id.clone(), i))
                .collect(),
            size,
        }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Assemble the slices at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> SliceBatch {
        let n = self.size;
        let mut images = Array4::zeros((idx.len(), 1, n, n));
        let mut masks = Array3::zeros((idx.len(), n, n));
        for (b, &i) in idx.iter().enumerate() {
            images.slice_mut(s![b, 0, .., ..]).assign(&self.images[i]);
            masks.slice_mut(s![b, .., ..]).assign(&self.masks[i]);
        }
        SliceBatch {
            images,
            masks,
            provenance: idx.iter().map(|&i| self.refs[i].clone()).collect(),
        }
    }
}

/// Batches covering every slice exactly once; the last batch may be short.
/// With `shuffle`, the order is a permutation drawn from that stream.
pub fn slice_iterator<'a>(
    set: &'a SliceSet,
    batch_size: usize,
    shuffle: Option<SeedTree>,
) -> impl Iterator<Item = SliceBatch> + 'a {
    let mut order: Vec<usize> = (0..set.len()).collect();
    if let Some(seeds) = shuffle {
        order.shuffle(&mut seeds.rng());
    }
    let batch_size = batch_size.max(1);
    (0..set.num_batches(batch_size)).map(move |b| {
        let end = ((b + 1) * batch_size).min(order.len());
        set.batch(&order[b * batch_size..end])
    })
}

/// Alias kept for callers that name the iterator type.
pub type SliceIterator<'a> = Box<dyn Iterator<Item = SliceBatch> + 'a>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn vols() -> Vec<VolumeSample> {
        (0..2)
            .map(|s| {
                let vox = Array3::from_shape_fn((10, 8, 8), |(d, h, w)| (d * 64 + h * 8 + w) as f32);
                let lab = Array3::from_shape_fn((10, 8, 8), |(d, _, _)| (d % 3) as u8);
                VolumeSample::new(vox, lab, [1.0; 3], "t", format!("s{s}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_counting() {
        let set = SliceSet::from_volumes(&vols(), 0, 8, Exec::Sequential);
        let sizes: Vec<usize> = slice_iterator(&set, 4, None).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 4, 4, 4]);
        let sizes: Vec<usize> = slice_iterator(&set, 3, None).map(|b| b.len()).collect();
        assert_eq!(sizes.len(), 7);
        assert_eq!(*sizes.last().unwrap(), 2);
    }

    #[test]
    fn unshuffled_order_is_lexicographic() {
        let set = SliceSet::from_volumes(&vols(), 0, 8, Exec::Parallel);
        let refs: Vec<SliceRef> = slice_iterator(&set, 4, None).flat_map(|b| b.provenance).collect();
        let mut sorted = refs.clone();
        sorted.sort();
        assert_eq!(refs, sorted);
    }

    #[test]
    fn shuffled_epoch_covers_every_slice_once() {
        let set = SliceSet::from_volumes(&vols(), 0, 16, Exec::Parallel);
        let mut count: BTreeMap<SliceRef, usize> = BTreeMap::new();
        for b in slice_iterator(&set, 3, Some(SeedTree::new(1))) {
            for r in b.provenance {
                *count.entry(r).or_default() += 1;
            }
        }
        assert_eq!(count.len(), 20);
        assert!(count.values().all(|&c| c == 1));
    }

    #[test]
    fn resize_identity_and_nearest() {
        let img = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        assert_eq!(resize_image(&img, 4, 4), img);
        let mask = Array2::from_shape_fn((2, 2), |(y, x)| (y * 2 + x) as u8);
        let up = resize_mask(&mask, 4, 4);
        assert_eq!(up[[0, 0]], 0);
        assert_eq!(up[[3, 3]], 3);
        assert_eq!(resize_mask(&up, 2, 2), mask);
    }
}
