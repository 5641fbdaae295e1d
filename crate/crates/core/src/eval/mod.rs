//! Dice evaluation, parameter and FLOP accounting, report tables and mask
//! overlays.

mod flops;
mod overlay;
mod report;

pub use flops::{count_params, estimate_flops, layer_macs, layer_params};
pub use overlay::{contour, export_overlays, overlay_image, GT_COLOR, OVERLAP_COLOR, PRED_COLOR};
pub use report::{emit_report, render_report_csv, render_report_table, Baselines, REPORT_CSV, REPORT_TXT};

use ndarray::{ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::SliceSet;
use crate::error::{Error, Result};
use crate::models::SegmentationModel;
use crate::tensor::BinaryMask;

/// Dice `2|A∩B| / (|A| + |B|)` over all pixels of both masks; 1.0 when both
/// are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(gt.dim(), pred.dim()));
    }
    let (inter, sum) = Zip::from(pred.values())
        .and(gt.values())
        .fold((0usize, 0usize), |(i, s), &p, &g| {
            (i + usize::from(p & g), s + usize::from(p) + usize::from(g))
        });
    Ok(dice_from_counts(inter, sum))
}

pub(crate) fn dice_plane(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> f64 {
    let (inter, sum) = Zip::from(pred).and(gt).fold((0usize, 0usize), |(i, s), &p, &g| {
        (i + usize::from(p & g), s + usize::from(p) + usize::from(g))
    });
    dice_from_counts(inter, sum)
}

fn dice_from_counts(inter: usize, sum: usize) -> f64 {
    if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Distilled,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Distilled => "distilled",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            "distilled" => Ok(Role::Distilled),
            other => Err(Error::InvalidArgument(format!("unknown role {other:?}"))),
        }
    }
}

/// Test-set summary of one model. `flops` is `2 × MACs` at `input_shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model_name: String,
    pub role: Role,
    pub mean_dice: f64,
    /// Population standard deviation of per-slice dice (0-1 scale).
    pub std_dice: f64,
    pub n_samples: usize,
    pub params: usize,
    pub flops: u64,
    pub input_shape: (usize, usize, usize),
    pub per_slice: Vec<f64>,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Per-slice dice of the argmax prediction, in set order.
pub fn per_slice_dice(model: &dyn SegmentationModel, set: &SliceSet) -> Result<Vec<f64>> {
    (0..set.len())
        .map(|i| {
            let out = model.forward(&set.image_batch(i))?;
            let pred = out.logits.argmax();
            Ok(dice_plane(
                pred.values().index_axis(Axis(0), 0),
                set.masks[i].values().index_axis(Axis(0), 0),
            ))
        })
        .collect()
}

/// Evaluates `model` on `set`, with FLOPs counted at the set's slice size.
pub fn evaluate(model: &dyn SegmentationModel, set: &SliceSet, role: Role) -> Result<EvalResult> {
    let (h, w) = set.spatial().ok_or(Error::Empty("test set"))?;
    let per_slice = per_slice_dice(model, set)?;
    let (mean_dice, std_dice) = mean_std(&per_slice).ok_or(Error::Empty("test set"))?;
    let input_shape = (1, h, w);
    Ok(EvalResult {
        model_name: model.name().to_string(),
        role,
        mean_dice,
        std_dice,
        n_samples: per_slice.len(),
        params: count_params(model),
        flops: estimate_flops(model, input_shape)?,
        input_shape,
        per_slice,
    })
}
