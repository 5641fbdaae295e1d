//! Typed tensors shared by the loss, feature and training code.
//!
//! Layout is always NCHW for real-valued maps and NHW for masks.

use ndarray::{s, Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Tolerance on per-pixel channel sums for a [`ProbabilityMap`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Unnormalized per-pixel class scores, `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    values: Array4<f64>,
}

impl LogitMap {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.shape()[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "logit map needs at least 2 classes, got {}",
                values.shape()[1]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite logit".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    /// Per-pixel argmax; same labels as the argmax of the softmax.
    pub fn argmax(&self) -> BinaryMask {
        argmax_mask(&self.values)
    }
}

/// Per-pixel class distributions, `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    values: Array4<f64>,
}

impl ProbabilityMap {
    /// Validates entries in `[0, 1]` and channel sums within [`PROB_SUM_TOL`].
    pub fn new(values: Array4<f64>) -> Result<Self> {
        validate_distribution(&values)?;
        Ok(Self { values })
    }

    /// Wraps values already known to be a distribution (softmax outputs,
    /// convex combinations of distributions).
    pub(crate) fn from_raw(values: Array4<f64>) -> Self {
        Self { values }
    }

    /// One-hot encoding of a mask with `classes` channels.
    pub fn one_hot(mask: &BinaryMask, classes: usize) -> Self {
        let (b, h, w) = mask.dim();
        let mut values = Array4::<f64>::zeros((b, classes, h, w));
        for ((bi, y, x), &m) in mask.values().indexed_iter() {
            values[[bi, m as usize, y, x]] = 1.0;
        }
        Self { values }
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    /// Per-pixel argmax (first maximal class wins ties).
    pub fn argmax(&self) -> BinaryMask {
        argmax_mask(&self.values)
    }
}

fn validate_distribution(values: &Array4<f64>) -> Result<()> {
    let (b, c, h, w) = values.dim();
    if c < 2 {
        return Err(Error::InvalidDistribution(format!("{c} channels")));
    }
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for ci in 0..c {
                    let p = values[[bi, ci, y, x]];
                    if !(-PROB_SUM_TOL..=1.0 + PROB_SUM_TOL).contains(&p) {
                        return Err(Error::InvalidDistribution(format!("entry {p} at [{bi},{ci},{y},{x}]")));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::InvalidDistribution(format!(
                        "channel sum {sum} at [{bi},:,{y},{x}]"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Hard 0/1 labels, `[B, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array3<u8>,
}

impl BinaryMask {
    pub fn new(values: Array3<u8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} not in {{0,1}}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<u8> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Single-sample view as a new mask of batch size one.
    pub fn sample(&self, index: usize) -> BinaryMask {
        let v = self.values.slice(s![index..index + 1, .., ..]).to_owned();
        BinaryMask { values: v }
    }

    /// Stacks single-sample masks along the batch axis.
    pub fn stack(masks: &[&BinaryMask]) -> Result<BinaryMask> {
        let views: Vec<_> = masks.iter().map(|m| m.values.view()).collect();
        let values = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(format!("cannot stack masks: {e}")))?;
        Ok(BinaryMask { values })
    }

    /// Nearest-neighbour resample of every sample to `h × w`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> BinaryMask {
        let (b, sh, sw) = self.dim();
        if (sh, sw) == (h, w) {
            return self.clone();
        }
        let mut out = Array3::<u8>::zeros((b, h, w));
        for bi in 0..b {
            let plane = crate::resample::nearest(self.values.index_axis(Axis(0), bi), h, w);
            out.index_axis_mut(Axis(0), bi).assign(&plane);
        }
        BinaryMask { values: out }
    }
}

pub(crate) fn argmax_mask(values: &Array4<f64>) -> BinaryMask {
    let (b, c, h, w) = values.dim();
    let mut out = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = values[[bi, 0, y, x]];
                for ci in 1..c {
                    let v = values[[bi, ci, y, x]];
                    if v > best_v {
                        best = ci;
                        best_v = v;
                    }
                }
                // Masks are binary: any non-background class counts as foreground.
                out[[bi, y, x]] = u8::from(best > 0);
            }
        }
    }
    BinaryMask { values: out }
}

pub(crate) fn check_same_spatial(probs: (usize, usize, usize, usize), mask: (usize, usize, usize)) -> Result<()> {
    let (b, _, h, w) = probs;
    if (b, h, w) != mask {
        return Err(Error::shape((b, h, w), mask));
    }
    Ok(())
}

pub(crate) fn l2_norm(view: ArrayView2<f64>) -> f64 {
    view.iter().map(|v| v * v).sum::<f64>().sqrt()
}
