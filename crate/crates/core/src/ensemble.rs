//! Adaptive aggregation of several frozen teachers.
//!
//! Per-teacher weights are the teachers' soft Dice losses on the current
//! batch, normalized to sum to one. The combined soft target and the
//! multi-teacher Mid loss are convex combinations under those weights.

use std::borrow::Borrow;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mid_loss_reduced, FeatureMap, LayerPairing, MidTerms, ReducedTap};
use crate::losses::soft_dice_loss;
use crate::models::SegmentationModel;
use crate::tensor::{BinaryMask, ProbabilityMap};

/// Below this total Dice loss every teacher counts as perfect.
pub const DEGENERATE_DICE_SUM: f64 = 1e-12;
/// Tolerance on `sum(weights) == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// `w_j = d_j / sum_k d_k`: larger Dice loss, larger weight.
    #[default]
    AsWritten,
    /// `w_j ∝ 1 / d_j`: better teachers weigh more.
    Inverse,
}

/// Normalizes per-teacher Dice losses into ensemble weights.
pub fn weights_from_dice_losses(dice_losses: &[f64], mode: WeightingMode) -> Result<Vec<f64>> {
    let n = dice_losses.len();
    if n == 0 {
        return Err(Error::Empty("teacher list"));
    }
    if let Some(d) = dice_losses.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::InvalidArgument(format!("dice loss {d}")));
    }
    let uniform = || vec![1.0 / n as f64; n];
    match mode {
        WeightingMode::AsWritten => {
            let sum: f64 = dice_losses.iter().sum();
            if sum < DEGENERATE_DICE_SUM {
                return Ok(uniform());
            }
            Ok(dice_losses.iter().map(|d| d / sum).collect())
        }
        WeightingMode::Inverse => {
            let perfect: Vec<bool> = dice_losses.iter().map(|&d| d < DEGENERATE_DICE_SUM).collect();
            let n_perfect = perfect.iter().filter(|&&p| p).count();
            if n_perfect > 0 {
                return Ok(perfect
                    .iter()
                    .map(|&p| if p { 1.0 / n_perfect as f64 } else { 0.0 })
                    .collect());
            }
            let inv: Vec<f64> = dice_losses.iter().map(|d| 1.0 / d).collect();
            let sum: f64 = inv.iter().sum();
            Ok(inv.iter().map(|v| v / sum).collect())
        }
    }
}

/// Per-teacher weights from each teacher's soft Dice loss against `target`.
pub fn adaptive_weights(
    teacher_probs: &[ProbabilityMap],
    target: &BinaryMask,
    mode: WeightingMode,
) -> Result<Vec<f64>> {
    if teacher_probs.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    let d = teacher_probs
        .iter()
        .map(|p| soft_dice_loss(p, target))
        .collect::<Result<Vec<_>>>()?;
    weights_from_dice_losses(&d, mode)
}

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "negative or non-finite weight in {weights:?}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}")));
    }
    Ok(())
}

/// `sum_j w_j p_j`, accumulated in teacher order.
pub fn combined_teacher_prediction<P: Borrow<ProbabilityMap>>(
    teacher_probs: &[P],
    weights: &[f64],
) -> Result<ProbabilityMap> {
    if teacher_probs.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teachers but {} weights",
            teacher_probs.len(),
            weights.len()
        )));
    }
    if teacher_probs.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    validate_weights(weights)?;
    let dim = teacher_probs[0].borrow().dim();
    let mut out = Array4::<f64>::zeros(dim);
    for (p, &w) in teacher_probs.iter().zip(weights) {
        let p = p.borrow();
        if p.dim() != dim {
            return Err(Error::shape(dim, p.dim()));
        }
        out.scaled_add(w, p.values());
    }
    Ok(ProbabilityMap::from_raw(out))
}

/// `sum_j w_j * mid_loss(student, teacher_j)`.
pub fn multi_mid_loss(
    student_feats: &[FeatureMap],
    teacher_feat_lists: &[Vec<FeatureMap>],
    weights: &[f64],
    mask: &BinaryMask,
    pairings: &[LayerPairing],
) -> Result<f64> {
    let reduced: Vec<Vec<ReducedTap>> = teacher_feat_lists
        .iter()
        .map(|l| l.iter().map(ReducedTap::from_feature).collect())
        .collect();
    multi_mid_loss_reduced(student_feats, &reduced, weights, mask, pairings, false).map(|(v, _, _)| v)
}

/// Total, per-teacher terms and optional student-feature gradients.
pub type MultiMidOutput = (f64, Vec<MidTerms>, Option<Vec<Array4<f64>>>);

/// Weighted Mid loss over teachers given their reduced taps. Returns the
/// total, the per-teacher unweighted terms and, on request, the gradient
/// with respect to each student feature.
pub fn multi_mid_loss_reduced<T: AsRef<[ReducedTap]>>(
    student_feats: &[FeatureMap],
    teachers: &[T],
    weights: &[f64],
    mask: &BinaryMask,
    pairings: &[LayerPairing],
    want_grad: bool,
) -> Result<MultiMidOutput> {
    if teachers.len() != weights.len() || teachers.len() != pairings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teachers, {} weights, {} pairings",
            teachers.len(),
            weights.len(),
            pairings.len()
        )));
    }
    if teachers.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    validate_weights(weights)?;
    let mut total = 0.0;
    let mut per_teacher = Vec::with_capacity(teachers.len());
    let mut grads: Option<Vec<Array4<f64>>> = want_grad.then(|| {
        student_feats
            .iter()
            .map(|f| Array4::zeros(f.values.raw_dim()))
            .collect()
    });
    for ((taps, pairing), &w) in teachers.iter().zip(pairings).zip(weights) {
        let (terms, g) = mid_loss_reduced(student_feats, taps.as_ref(), mask, pairing, want_grad)?;
        total += w * terms.total();
        per_teacher.push(terms);
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            for (a, g) in acc.iter_mut().zip(g) {
                a.scaled_add(w, &g);
            }
        }
    }
    Ok((total, per_teacher, grads))
}

/// Frozen teachers with the weights of the most recent batch.
pub struct TeacherEnsemble {
    pub teachers: Vec<Box<dyn SegmentationModel>>,
    pub weights: Vec<f64>,
}

impl TeacherEnsemble {
    /// Starts with uniform weights.
    pub fn new(teachers: Vec<Box<dyn SegmentationModel>>) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::Empty("teacher list"));
        }
        let n = teachers.len();
        Ok(Self {
            teachers,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.teachers.len() {
            return Err(Error::InvalidArgument("weight count does not match teachers".into()));
        }
        validate_weights(&weights)?;
        self.weights = weights;
        Ok(())
    }
}
