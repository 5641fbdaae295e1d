//! Scalar losses of the distillation objective and their gradients.
//!
//! Every loss has a plain evaluation function and a `*_grad` twin returning
//! `(value, gradient)`. Gradients of the segmentation losses are taken with
//! respect to probabilities; [`softmax_backward`] chains them to logits.
//! The KL term is differentiated directly with respect to student logits.

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_same_spatial, BinaryMask, LogitMap, ProbabilityMap};

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Lower clamp on teacher probabilities inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-8;

/// Channel holding the foreground class.
pub const FOREGROUND: usize = 1;

/// Argument order of the KL prediction-distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher || student)`, the usual distillation convention.
    TeacherStudent,
}

/// Coefficients of the segmentation and distillation losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Soft Dice coefficient.
    pub alpha1: f64,
    /// Lovász-softmax coefficient.
    pub alpha2: f64,
    /// Intermediate-feature (Mid) coefficient.
    pub alpha: f64,
    /// KL coefficient.
    pub beta: f64,
    /// Softmax temperature applied to student and teacher logits for KL.
    pub temperature: f64,
    pub kl_direction: KlDirection,
    /// Multiply the KL term by `temperature²`.
    pub scale_kl_by_t2: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.2,
            alpha2: 0.3,
            alpha: 0.1,
            beta: 0.1,
            temperature: 2.0,
            kl_direction: KlDirection::StudentTeacher,
            scale_kl_by_t2: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        check_temperature(self.temperature)
    }

    /// KL coefficient including the optional `temperature²` factor.
    pub fn effective_beta(&self) -> f64 {
        if self.scale_kl_by_t2 {
            self.beta * self.temperature * self.temperature
        } else {
            self.beta
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Per-pixel `log softmax(z / t)` along the channel axis.
fn log_softmax(values: &Array4<f64>, temperature: f64) -> Array4<f64> {
    let mut out = values.mapv(|z| z / temperature);
    for mut lane in out.lanes_mut(Axis(1)) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        lane.mapv_inplace(|v| v - lse);
    }
    out
}

/// Temperature-softened softmax over the class axis.
pub fn softened_softmax(logits: &LogitMap, temperature: f64) -> Result<ProbabilityMap> {
    check_temperature(temperature)?;
    Ok(ProbabilityMap::from_raw(softmax_values(logits.values(), temperature)))
}

pub(crate) fn softmax_values(values: &Array4<f64>, temperature: f64) -> Array4<f64> {
    let mut out = values.mapv(|z| z / temperature);
    for mut lane in out.lanes_mut(Axis(1)) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// Chains a gradient with respect to `probs = softmax(z / t)` back to `z`.
pub fn softmax_backward(probs: &Array4<f64>, grad_probs: &Array4<f64>, temperature: f64) -> Array4<f64> {
    let mut out = Array4::<f64>::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs
        .lanes(Axis(1))
        .into_iter()
        .zip(grad_probs.lanes(Axis(1)))
        .zip(out.lanes_mut(Axis(1)))
    {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for k in 0..p.len() {
            o[k] = p[k] * (g[k] - dot) / temperature;
        }
    }
    out
}

/// Mean per-pixel KL divergence between softened student predictions and
/// teacher distributions, in the order given by `direction`.
pub fn kl_distillation_loss(
    student_logits: &LogitMap,
    teacher_probs: &ProbabilityMap,
    temperature: f64,
    direction: KlDirection,
) -> Result<f64> {
    kl_distillation_grad(student_logits, teacher_probs, temperature, direction).map(|(v, _)| v)
}

/// [`kl_distillation_loss`] and its gradient with respect to student logits.
pub fn kl_distillation_grad(
    student_logits: &LogitMap,
    teacher_probs: &ProbabilityMap,
    temperature: f64,
    direction: KlDirection,
) -> Result<(f64, Array4<f64>)> {
    check_temperature(temperature)?;
    if student_logits.dim() != teacher_probs.dim() {
        return Err(Error::shape(teacher_probs.dim(), student_logits.dim()));
    }
    // Re-check: ProbabilityMap::from_raw skips validation for internal producers.
    ProbabilityMap::new(teacher_probs.values().clone())?;

    let log_p = log_softmax(student_logits.values(), temperature);
    let q = teacher_probs.values();
    let (b, c, h, w) = student_logits.dim();
    let n = (b * h * w) as f64;
    let mut grad = Array4::<f64>::zeros((b, c, h, w));
    let mut total = 0.0;

    for ((lp, q), mut g) in log_p
        .lanes(Axis(1))
        .into_iter()
        .zip(q.lanes(Axis(1)))
        .zip(grad.lanes_mut(Axis(1)))
    {
        match direction {
            KlDirection::StudentTeacher => {
                let mut pixel = 0.0;
                for k in 0..c {
                    let p = lp[k].exp();
                    let a = lp[k] - q[k].max(KL_FLOOR).ln();
                    g[k] = a;
                    pixel += p * a;
                }
                for k in 0..c {
                    g[k] = lp[k].exp() * (g[k] - pixel) / (temperature * n);
                }
                total += pixel;
            }
            KlDirection::TeacherStudent => {
                let mut pixel = 0.0;
                for k in 0..c {
                    if q[k] > 0.0 {
                        pixel += q[k] * (q[k].max(KL_FLOOR).ln() - lp[k]);
                    }
                    g[k] = (lp[k].exp() - q[k]) / (temperature * n);
                }
                total += pixel;
            }
        }
    }
    Ok((total / n, grad))
}

/// Soft Dice loss on the foreground channel, averaged over the batch.
pub fn soft_dice_loss(probs: &ProbabilityMap, target: &BinaryMask) -> Result<f64> {
    Ok(soft_dice_per_sample(probs, target)?.iter().sum::<f64>() / target.batch() as f64)
}

/// Per-sample soft Dice losses (batch order).
pub fn soft_dice_per_sample(probs: &ProbabilityMap, target: &BinaryMask) -> Result<Vec<f64>> {
    check_same_spatial(probs.dim(), target.dim())?;
    let p = probs.values();
    let y = target.values();
    Ok((0..target.batch())
        .map(|b| {
            let (inter, sum) = dice_terms(p, y, b);
            1.0 - (2.0 * inter + DICE_SMOOTH) / (sum + DICE_SMOOTH)
        })
        .collect())
}

fn dice_terms(p: &Array4<f64>, y: &ndarray::Array3<u8>, b: usize) -> (f64, f64) {
    let fg = p.index_axis(Axis(0), b);
    let fg = fg.index_axis(Axis(0), FOREGROUND);
    let yb = y.index_axis(Axis(0), b);
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&pv, &yv) in fg.iter().zip(yb.iter()) {
        let yv = f64::from(yv);
        inter += pv * yv;
        sum += pv + yv;
    }
    (inter, sum)
}

/// [`soft_dice_loss`] and its gradient with respect to `probs`.
pub fn soft_dice_grad(probs: &ProbabilityMap, target: &BinaryMask) -> Result<(f64, Array4<f64>)> {
    check_same_spatial(probs.dim(), target.dim())?;
    let p = probs.values();
    let y = target.values();
    let batch = target.batch();
    let mut grad = Array4::<f64>::zeros(p.raw_dim());
    let mut total = 0.0;
    for b in 0..batch {
        let (inter, sum) = dice_terms(p, y, b);
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sum + DICE_SMOOTH;
        total += 1.0 - num / den;
        let mut g = grad.index_axis_mut(Axis(0), b);
        let mut g = g.index_axis_mut(Axis(0), FOREGROUND);
        for (gv, &yv) in g.iter_mut().zip(y.index_axis(Axis(0), b).iter()) {
            let yv = f64::from(yv);
            *gv = -(2.0 * yv * den - num) / (den * den) / batch as f64;
        }
    }
    Ok((total / batch as f64, grad))
}

/// Increments of the Jaccard-loss set function along a sorted label vector.
///
/// `g[k]` is the change in `1 - |I|/|U|` when the `k`-th pixel (in sorted
/// order) joins the error set; `g[0]` is the value for the first pixel alone.
pub fn jaccard_increments(sorted_labels: &[u8]) -> Result<Vec<f64>> {
    if sorted_labels.is_empty() {
        return Err(Error::Empty("label vector"));
    }
    if let Some(v) = sorted_labels.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!("label {v} not in {{0,1}}")));
    }
    let total: usize = sorted_labels.iter().map(|&v| usize::from(v)).sum();
    if total == 0 {
        return Ok(vec![0.0; sorted_labels.len()]);
    }
    let t = total as f64;
    let mut out = Vec::with_capacity(sorted_labels.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &l in sorted_labels {
        if l == 1 {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (t - cum_fg) / (t + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    Ok(out)
}

/// Lovász-softmax loss: per image, averaged over classes present in the
/// target, then averaged over the batch.
pub fn lovasz_softmax_loss(probs: &ProbabilityMap, target: &BinaryMask) -> Result<f64> {
    lovasz_impl(probs, target, false).map(|(v, _)| v)
}

/// [`lovasz_softmax_loss`] and its gradient with respect to `probs`, holding
/// the sort permutation fixed.
pub fn lovasz_softmax_grad(probs: &ProbabilityMap, target: &BinaryMask) -> Result<(f64, Array4<f64>)> {
    lovasz_impl(probs, target, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn lovasz_impl(probs: &ProbabilityMap, target: &BinaryMask, want_grad: bool) -> Result<(f64, Option<Array4<f64>>)> {
    check_same_spatial(probs.dim(), target.dim())?;
    let p = probs.values();
    let (batch, classes, _, _) = p.dim();
    let mut grad = want_grad.then(|| Array4::<f64>::zeros(p.raw_dim()));
    let mut total = 0.0;
    let mut errors = Vec::new();
    let mut order = Vec::new();
    let mut sorted_labels = Vec::new();

    for b in 0..batch {
        let y = target.values().index_axis(Axis(0), b);
        let present: Vec<usize> = (0..classes.min(2))
            .filter(|&c| y.iter().any(|&v| usize::from(v) == c))
            .collect();
        let scale = 1.0 / (present.len() as f64 * batch as f64);
        let mut image_loss = 0.0;
        for &c in &present {
            let pc = p.index_axis(Axis(0), b);
            let pc = pc.index_axis(Axis(0), c);
            errors.clear();
            errors.extend(
                pc.iter()
                    .zip(y.iter())
                    .map(|(&pv, &yv)| (f64::from(u8::from(usize::from(yv) == c)) - pv).abs()),
            );
            order.clear();
            order.extend(0..errors.len());
            order.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]));
            sorted_labels.clear();
            let flat_y: Vec<u8> = y.iter().map(|&v| u8::from(usize::from(v) == c)).collect();
            sorted_labels.extend(order.iter().map(|&i| flat_y[i]));
            let incr = jaccard_increments(&sorted_labels)?;
            let loss_c: f64 = order.iter().zip(&incr).map(|(&i, g)| errors[i] * g).sum();
            image_loss += loss_c;

            if let Some(grad) = grad.as_mut() {
                let mut gb = grad.index_axis_mut(Axis(0), b);
                let mut gc = gb.index_axis_mut(Axis(0), c);
                let flat = gc.as_slice_mut().expect("freshly allocated gradient is contiguous");
                for (&i, g) in order.iter().zip(&incr) {
                    // e = |y - p| with y in {0,1}: de/dp = -1 on the class, +1 off it.
                    let sign = if flat_y[i] == 1 { -1.0 } else { 1.0 };
                    flat[i] = sign * g * scale;
                }
            }
        }
        total += image_loss / present.len() as f64;
    }
    Ok((total / batch as f64, grad))
}

/// Weighted segmentation loss `alpha1 * dice + alpha2 * lovasz`.
pub fn segmentation_loss(probs: &ProbabilityMap, target: &BinaryMask, w: &LossWeights) -> Result<f64> {
    let dice = soft_dice_loss(probs, target)?;
    let lovasz = lovasz_softmax_loss(probs, target)?;
    Ok(w.alpha1 * dice + w.alpha2 * lovasz)
}

/// Value and probability-gradient of [`segmentation_loss`].
#[derive(Debug, Clone)]
pub struct SegmentationTerms {
    pub dice: f64,
    pub lovasz: f64,
    pub total: f64,
    pub grad_probs: Array4<f64>,
}

pub fn segmentation_grad(probs: &ProbabilityMap, target: &BinaryMask, w: &LossWeights) -> Result<SegmentationTerms> {
    let (dice, gd) = soft_dice_grad(probs, target)?;
    let (lovasz, gl) = lovasz_softmax_grad(probs, target)?;
    let grad_probs = gd * w.alpha1 + gl * w.alpha2;
    Ok(SegmentationTerms {
        dice,
        lovasz,
        total: w.alpha1 * dice + w.alpha2 * lovasz,
        grad_probs,
    })
}

/// Total distillation loss `seg + alpha * mid + beta * kl`.
pub fn kd_total_loss(seg: f64, mid: f64, kl: f64, w: &LossWeights) -> Result<f64> {
    if ![seg, mid, kl].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite loss component (seg {seg}, mid {mid}, kl {kl})"
        )));
    }
    Ok(seg + w.alpha * mid + w.effective_beta() * kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn logits(v: &[f64]) -> LogitMap {
        LogitMap::new(Array4::from_shape_vec((1, v.len(), 1, 1), v.to_vec()).unwrap()).unwrap()
    }

    fn probs(v: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(Array4::from_shape_vec((1, v.len(), 1, 1), v.to_vec()).unwrap()).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> BinaryMask {
        BinaryMask::new(Array3::from_shape_vec((1, h, w), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softened_softmax(&logits(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.values().as_slice().unwrap(), &[0.5, 0.5]);

        let cold = softened_softmax(&logits(&[1.0, 2.0]), 1.0).unwrap();
        let warm = softened_softmax(&logits(&[1.0, 2.0]), 4.0).unwrap();
        assert!(warm.values()[[0, 1, 0, 0]] < cold.values()[[0, 1, 0, 0]]);

        let p = softened_softmax(&logits(&[1.0, 2.0]), 2.0).unwrap();
        assert!((p.values()[[0, 0, 0, 0]] - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!((p.values()[[0, 1, 0, 0]] - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softened_softmax(&logits(&[0.0, 1.0]), 0.0).is_err());
        assert!(softened_softmax(&logits(&[0.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        // ln(0.6) and ln(0.4) as logits give p = (0.6, 0.4) at t = 1.
        let s = logits(&[0.6f64.ln(), 0.4f64.ln()]);
        let kl = kl_distillation_loss(&s, &probs(&[0.8, 0.2]), 1.0, KlDirection::StudentTeacher).unwrap();
        let oracle = 0.6 * (0.6f64 / 0.8).ln() + 0.4 * (0.4f64 / 0.2).ln();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 0.1046).abs() < 1e-3);

        let same = kl_distillation_loss(&s, &probs(&[0.6, 0.4]), 1.0, KlDirection::StudentTeacher).unwrap();
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn kl_reverse_direction() {
        let s = logits(&[0.6f64.ln(), 0.4f64.ln()]);
        let kl = kl_distillation_loss(&s, &probs(&[0.8, 0.2]), 1.0, KlDirection::TeacherStudent).unwrap();
        let oracle = 0.8 * (0.8f64 / 0.6).ln() + 0.2 * (0.2f64 / 0.4).ln();
        assert!((kl - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_shape_and_distribution_errors() {
        let s = logits(&[0.0, 1.0]);
        let t = ProbabilityMap::new(Array4::from_elem((1, 2, 1, 2), 0.5)).unwrap();
        assert!(matches!(
            kl_distillation_loss(&s, &t, 1.0, KlDirection::StudentTeacher),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad = ProbabilityMap::from_raw(Array4::from_shape_vec((1, 2, 1, 1), vec![0.9, 0.9]).unwrap());
        assert!(matches!(
            kl_distillation_loss(&s, &bad, 1.0, KlDirection::StudentTeacher),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn dice_examples() {
        let y = mask(2, 2, &[1, 1, 0, 1]);
        let perfect = ProbabilityMap::one_hot(&y, 2);
        assert!(soft_dice_loss(&perfect, &y).unwrap() < 1e-5);

        let disjoint_pred = mask(2, 2, &[0, 0, 1, 0]);
        let d = soft_dice_loss(&ProbabilityMap::one_hot(&disjoint_pred, 2), &y).unwrap();
        assert!((d - 1.0).abs() < 1e-5);

        let y4 = mask(2, 3, &[1, 1, 1, 1, 0, 0]);
        let half = mask(2, 3, &[1, 1, 0, 0, 0, 0]);
        let d = soft_dice_loss(&ProbabilityMap::one_hot(&half, 2), &y4).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn dice_shape_mismatch() {
        let y = mask(2, 2, &[1, 0, 0, 1]);
        let p = ProbabilityMap::one_hot(&mask(1, 4, &[1, 0, 0, 1]), 2);
        assert!(soft_dice_loss(&p, &y).is_err());
    }

    #[test]
    fn jaccard_increment_examples() {
        assert_eq!(jaccard_increments(&[1]).unwrap(), vec![1.0]);
        // A false positive after the only foreground miss leaves J at 1.
        assert_eq!(jaccard_increments(&[1, 0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(jaccard_increments(&[0, 1]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(jaccard_increments(&[0, 0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(jaccard_increments(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn lovasz_examples() {
        let y = mask(2, 2, &[1, 1, 0, 0]);
        let exact = ProbabilityMap::one_hot(&y, 2);
        assert!(lovasz_softmax_loss(&exact, &y).unwrap().abs() < 1e-12);

        // All foreground missed, no false positives: the foreground class
        // contributes 1, background (J = 2/4) contributes 1/2.
        let miss = ProbabilityMap::one_hot(&mask(2, 2, &[0, 0, 0, 0]), 2);
        let (loss, _) = lovasz_impl(&miss, &y, false).unwrap();
        assert!((loss - 0.75).abs() < 1e-12);
        let fg_only = foreground_lovasz(&miss, &y);
        assert!((fg_only - 1.0).abs() < 1e-12);
    }

    fn foreground_lovasz(p: &ProbabilityMap, y: &BinaryMask) -> f64 {
        let errors: Vec<f64> = p
            .values()
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), FOREGROUND)
            .iter()
            .zip(y.values().iter())
            .map(|(&pv, &yv)| (f64::from(yv) - pv).abs())
            .collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]));
        let labels: Vec<u8> = order
            .iter()
            .map(|&i| y.values().iter().nth(i).copied().unwrap())
            .collect();
        let g = jaccard_increments(&labels).unwrap();
        order.iter().zip(&g).map(|(&i, g)| errors[i] * g).sum()
    }

    #[test]
    fn segmentation_and_total_examples() {
        let w = LossWeights::default();
        let y = mask(2, 2, &[1, 0, 0, 1]);
        let exact = ProbabilityMap::one_hot(&y, 2);
        assert!(segmentation_loss(&exact, &y, &w).unwrap() < 1e-5);

        let lin = w.alpha1 / 3.0 + w.alpha2 * 0.5;
        assert!((lin - 0.216_666_666_666_666_7).abs() < 1e-12);

        let zero = LossWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            ..w.clone()
        };
        let any = ProbabilityMap::new(Array4::from_elem((1, 2, 2, 2), 0.5)).unwrap();
        assert_eq!(segmentation_loss(&any, &y, &zero).unwrap(), 0.0);

        assert_eq!(kd_total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!((kd_total_loss(0.2, 0.5, 0.3, &w).unwrap() - 0.28).abs() < 1e-15);
        let off = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        assert_eq!(kd_total_loss(0.37, 4.0, 9.0, &off).unwrap(), 0.37);
        assert!(kd_total_loss(f64::NAN, 0.0, 0.0, &off).is_err());
    }

    #[test]
    fn t2_scaling_flag() {
        let w = LossWeights {
            scale_kl_by_t2: true,
            temperature: 3.0,
            ..Default::default()
        };
        assert!((w.effective_beta() - 0.9).abs() < 1e-15);
    }
}
