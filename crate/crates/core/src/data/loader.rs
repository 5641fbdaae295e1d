use std::path::Path;

use image::DynamicImage;
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::manifest::SliceRecord;
use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-slice min-max to `[0, 1]`; a constant slice maps to zeros.
    #[default]
    Minmax,
    /// Per-slice zero mean, unit variance; a constant slice maps to zeros.
    Zscore,
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Grayscale image scaled to `[0, 1]` by its bit depth.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
    };
    Ok(Array2::from_shape_vec((h, w), values).expect("image buffer size"))
}

/// Reads a mask encoded as `{0, 1}` or `{0, max}` (255 for 8-bit, 65535
/// for 16-bit). Any other value is rejected.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (raw, full): (Vec<u32>, u32) = match img {
        DynamicImage::ImageLuma8(buf) => (buf.into_raw().into_iter().map(u32::from).collect(), 255),
        DynamicImage::ImageLuma16(buf) => (buf.into_raw().into_iter().map(u32::from).collect(), 65535),
        other => (other.into_luma8().into_raw().into_iter().map(u32::from).collect(), 255),
    };
    let max = raw.iter().copied().max().unwrap_or(0);
    let on = if max <= 1 { 1 } else { full };
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != on) {
        return Err(Error::NonBinaryMask {
            path: path.to_path_buf(),
            detail: format!("value {v} (expected 0 or {on})"),
        });
    }
    // Threshold at half scale.
    let values = raw
        .into_iter()
        .map(|v| u8::from(f64::from(v) / f64::from(on) >= 0.5))
        .collect();
    Ok(Array2::from_shape_vec((h, w), values).expect("mask buffer size"))
}

pub fn normalize(img: &mut Array2<f64>, mode: Normalization) {
    match mode {
        Normalization::Minmax => {
            let min = img.iter().copied().fold(f64::INFINITY, f64::min);
            let max = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = max - min;
            if range > 0.0 {
                img.mapv_inplace(|v| (v - min) / range);
            } else {
                img.fill(0.0);
            }
        }
        Normalization::Zscore => {
            let n = img.len() as f64;
            let mean = img.sum() / n;
            let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var > 0.0 {
                let std = var.sqrt();
                img.mapv_inplace(|v| (v - mean) / std);
            } else {
                img.fill(0.0);
            }
        }
    }
}

/// Loads one record: image resized bilinearly and normalized, mask resized
/// nearest-neighbour.
pub fn load_slice(
    record: &SliceRecord,
    target_hw: (usize, usize),
    normalization: Normalization,
) -> Result<(Array2<f64>, Array2<u8>)> {
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("target size {th}x{tw}")));
    }
    let raw = read_gray(&record.image_path)?;
    let mut img = resample::bilinear(raw.view(), th, tw);
    normalize(&mut img, normalization);
    let mask = read_mask(&record.mask_path)?;
    let mask = if mask.dim() == (th, tw) {
        mask
    } else {
        resample::nearest(mask.view(), th, tw)
    };
    Ok((img, mask))
}

/// Loads records into `[B, 1, H, W]` images and a `[B, H, W]` mask, in
/// record order.
pub fn load_batch(
    records: &[SliceRecord],
    target_hw: (usize, usize),
    normalization: Normalization,
) -> Result<(Array4<f64>, BinaryMask)> {
    let (th, tw) = target_hw;
    let mut images = Array4::<f64>::zeros((records.len(), 1, th, tw));
    let mut masks = Array3::<u8>::zeros((records.len(), th, tw));
    for (i, r) in records.iter().enumerate() {
        let (img, mask) = load_slice(r, target_hw, normalization)?;
        images
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&img);
        masks.index_axis_mut(Axis(0), i).assign(&mask);
    }
    Ok((images, BinaryMask::new(masks)?))
}

/// A manifest loaded into memory at a fixed resolution, one `[1, H, W]`
/// image and `[1, H, W]` mask per record.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub records: Vec<SliceRecord>,
    pub images: Vec<Array3<f64>>,
    pub masks: Vec<BinaryMask>,
}

impl SliceSet {
    pub fn load(records: &[SliceRecord], target_hw: (usize, usize), normalization: Normalization) -> Result<Self> {
        let mut images = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        for r in records {
            let (img, mask) = load_slice(r, target_hw, normalization)?;
            images.push(img.insert_axis(Axis(0)));
            masks.push(BinaryMask::new(mask.insert_axis(Axis(0)))?);
        }
        Ok(Self {
            records: records.to_vec(),
            images,
            masks,
        })
    }

    /// Builds a set from in-memory arrays (records are synthesized).
    pub fn from_arrays(images: Vec<Array2<f64>>, masks: Vec<Array2<u8>>) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(Error::shape(images.len(), masks.len()));
        }
        let mut set = Self {
            records: Vec::with_capacity(images.len()),
            images: Vec::with_capacity(images.len()),
            masks: Vec::with_capacity(images.len()),
        };
        for (i, (img, mask)) in images.into_iter().zip(masks).enumerate() {
            if img.dim() != mask.dim() {
                return Err(Error::shape(img.dim(), mask.dim()));
            }
            set.records.push(SliceRecord {
                site: 0,
                patient_id: "memory".into(),
                slice_index: i as u32,
                image_path: String::new(),
                mask_path: String::new(),
            });
            set.images.push(img.insert_axis(Axis(0)));
            set.masks.push(BinaryMask::new(mask.insert_axis(Axis(0)))?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Spatial size of the slices, `None` when empty.
    pub fn spatial(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.shape()[1], i.shape()[2]))
    }

    /// Single-sample batch `[1, 1, H, W]`.
    pub fn image_batch(&self, index: usize) -> Array4<f64> {
        self.images[index].clone().insert_axis(Axis(0))
    }
}
