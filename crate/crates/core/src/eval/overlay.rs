use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Axis};

use crate::data::SliceSet;
use crate::error::{Error, Result};
use crate::models::SegmentationModel;

pub const GT_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
pub const OVERLAP_COLOR: [u8; 3] = [255, 255, 0];

/// Foreground pixels with a 4-neighbour in the background or on the image
/// border.
pub fn contour(mask: ArrayView2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[[y, x]] == 0 {
            return 0;
        }
        let edge = y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || mask[[y - 1, x]] == 0
            || mask[[y + 1, x]] == 0
            || mask[[y, x - 1]] == 0
            || mask[[y, x + 1]] == 0;
        u8::from(edge)
    })
}

/// Grayscale slice (min-max stretched) with the ground-truth contour in
/// green, the predicted contour in red and shared contour pixels in yellow.
pub fn overlay_image(image: ArrayView2<f64>, gt: ArrayView2<u8>, pred: ArrayView2<u8>) -> Result<RgbImage> {
    if image.dim() != gt.dim() || gt.dim() != pred.dim() {
        return Err(Error::shape(image.dim(), (gt.dim(), pred.dim())));
    }
    let (h, w) = image.dim();
    let min = image.iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if max > min { max - min } else { 1.0 };
    let gc = contour(gt);
    let pc = contour(pred);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        match (gc[[y, x]], pc[[y, x]]) {
            (1, 1) => Rgb(OVERLAP_COLOR),
            (1, 0) => Rgb(GT_COLOR),
            (0, 1) => Rgb(PRED_COLOR),
            _ => {
                let g = ((image[[y, x]] - min) / range * 255.0).round().clamp(0.0, 255.0) as u8;
                Rgb([g, g, g])
            }
        }
    }))
}

/// One PNG per slice, named `<index>_site<k>_<patient>_<slice>.png`.
pub fn export_overlays(
    model: &dyn SegmentationModel,
    set: &SliceSet,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let out = model.forward(&set.image_batch(i))?;
        let pred = out.logits.argmax();
        let img = overlay_image(
            set.images[i].index_axis(Axis(0), 0),
            set.masks[i].values().index_axis(Axis(0), 0),
            pred.values().index_axis(Axis(0), 0),
        )?;
        let r = &set.records[i];
        let path = dir.join(format!("{i:04}_site{}_{}_{}.png", r.site, r.patient_id, r.slice_index));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
