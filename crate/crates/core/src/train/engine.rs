use std::borrow::Cow;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::history::{EpochRecord, RunHistory, StepRecord};
use super::schedule::{cyclic_lr, Adam};
use super::TrainConfig;
use crate::data::SliceSet;
use crate::ensemble::{combined_teacher_prediction, multi_mid_loss_reduced, weights_from_dice_losses};
use crate::error::{Error, Result};
use crate::eval::per_slice_dice;
use crate::features::{FeatureMap, LayerPairing, ReducedTap};
use crate::losses::{
    kd_total_loss, kl_distillation_grad, segmentation_grad, soft_dice_loss, softened_softmax, softmax_backward,
    LossWeights,
};
use crate::models::{SegmentationModel, TrainableModel};
use crate::tensor::{BinaryMask, LogitMap, ProbabilityMap};

/// Minimizes the segmentation loss alone. On return `model` holds the
/// parameters of the best validation epoch.
pub fn train_teacher(
    model: &mut dyn TrainableModel,
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    run(model, &[], train, val, cfg)
}

/// Distills from one frozen teacher.
pub fn distill_mono(
    student: &mut dyn TrainableModel,
    teacher: &dyn SegmentationModel,
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    run(student, &[teacher], train, val, cfg)
}

/// Distills from an adaptively weighted ensemble of frozen teachers. With a
/// single teacher the weight is exactly 1 and the run matches
/// [`distill_mono`] bit for bit.
pub fn distill_multi(
    student: &mut dyn TrainableModel,
    teachers: &[&dyn SegmentationModel],
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    if teachers.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    run(student, teachers, train, val, cfg)
}

/// The configured pairing, or nearest-depth pairing, per teacher; each is
/// checked against the actual tap names.
pub fn resolve_pairings(
    student: &dyn SegmentationModel,
    teachers: &[&dyn SegmentationModel],
    configured: Option<&LayerPairing>,
) -> Result<Vec<LayerPairing>> {
    let s_taps: Vec<(String, f64)> = student
        .taps()
        .into_iter()
        .map(|t| (t.layer_id, t.depth_fraction))
        .collect();
    let s_ids: Vec<&str> = s_taps.iter().map(|t| t.0.as_str()).collect();
    teachers
        .iter()
        .map(|t| {
            let t_taps: Vec<(String, f64)> = t.taps().into_iter().map(|t| (t.layer_id, t.depth_fraction)).collect();
            let pairing = match configured {
                Some(p) => p.clone(),
                None => LayerPairing::nearest_depth(&s_taps, &t_taps)?,
            };
            let t_ids: Vec<&str> = t_taps.iter().map(|t| t.0.as_str()).collect();
            pairing.resolve(&s_ids, &t_ids)?;
            Ok(pairing)
        })
        .collect()
}

/// Frozen-teacher quantities for one training slice.
#[derive(Debug, Clone)]
struct TeacherSample {
    /// Softmax at the distillation temperature.
    soft: ProbabilityMap,
    /// Soft Dice loss of the temperature-1 prediction.
    dice: f64,
    taps: Vec<ReducedTap>,
}

fn teacher_sample(
    teacher: &dyn SegmentationModel,
    set: &SliceSet,
    index: usize,
    temperature: f64,
) -> Result<TeacherSample> {
    let out = teacher.forward(&set.image_batch(index))?;
    let soft = softened_softmax(&out.logits, temperature)?;
    let p1 = softened_softmax(&out.logits, 1.0)?;
    Ok(TeacherSample {
        soft,
        dice: soft_dice_loss(&p1, &set.masks[index])?,
        taps: out.taps.iter().map(ReducedTap::from_feature).collect(),
    })
}

#[derive(Debug, Default)]
pub(crate) struct BatchLosses {
    pub seg: f64,
    pub mid: f64,
    pub kl: f64,
}

/// Distillation targets for one slice.
pub(crate) struct KdTarget<'a> {
    pub soft: &'a ProbabilityMap,
    pub taps: &'a [&'a [ReducedTap]],
    pub weights: &'a [f64],
    pub pairings: &'a [LayerPairing],
}

/// Forward and backward of one slice whose loss enters the batch mean with
/// weight `1 / batch`. Returns the slice's loss components already divided
/// by `batch`.
pub(crate) fn sample_step(
    student: &dyn TrainableModel,
    image: ArrayView3<f64>,
    mask: &BinaryMask,
    kd: Option<KdTarget<'_>>,
    w: &LossWeights,
    batch: f64,
    grad: &mut [f64],
) -> Result<BatchLosses> {
    let student_taps = student.taps();
    let beta = w.effective_beta();
    let mut losses = BatchLosses::default();
    let mut upstream = |logits: &Array3<f64>, taps: &[Array3<f64>]| {
        let l4 = LogitMap::new(logits.clone().insert_axis(Axis(0)))?;
        let probs = softened_softmax(&l4, 1.0)?;
        let seg = segmentation_grad(&probs, mask, w)?;
        let mut d_logits = softmax_backward(probs.values(), &seg.grad_probs, 1.0);
        let mut d_taps: Vec<Array3<f64>> = taps.iter().map(|t| Array3::zeros(t.raw_dim())).collect();
        losses.seg = seg.total / batch;
        if let Some(kd) = &kd {
            let (kl, d_kl) = kl_distillation_grad(&l4, kd.soft, w.temperature, w.kl_direction)?;
            d_logits.scaled_add(beta, &d_kl);
            losses.kl = kl / batch;
            let feats = taps
                .iter()
                .zip(&student_taps)
                .map(|(t, info)| FeatureMap::new(t.clone().insert_axis(Axis(0)), &info.layer_id, info.depth_fraction))
                .collect::<Result<Vec<_>>>()?;
            let (mid, _, g) = multi_mid_loss_reduced(&feats, kd.taps, kd.weights, mask, kd.pairings, true)?;
            losses.mid = mid / batch;
            for (d, g) in d_taps.iter_mut().zip(g.expect("gradient requested")) {
                d.scaled_add(w.alpha / batch, &g.index_axis(Axis(0), 0));
            }
        }
        d_logits.mapv_inplace(|v| v / batch);
        Ok((d_logits.index_axis_move(Axis(0), 0), d_taps))
    };
    student.forward_backward(image, &mut upstream, grad)?;
    Ok(losses)
}

fn run(
    student: &mut dyn TrainableModel,
    teachers: &[&dyn SegmentationModel],
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    cfg.validate()?;
    if !student.trainable() {
        return Err(Error::InvalidArgument(format!("model {} is frozen", student.name())));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let pairings = resolve_pairings(&*student, teachers, cfg.pairing.as_ref())?;
    let w = &cfg.loss_weights;
    let start = Instant::now();

    let cache: Option<Vec<Vec<TeacherSample>>> = if cfg.cache_teacher_outputs && !teachers.is_empty() {
        let cached = teachers
            .iter()
            .map(|t| {
                (0..train.len())
                    .map(|i| teacher_sample(*t, train, i, w.temperature))
                    .collect()
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        debug!("cached teacher outputs in {:.1}s", start.elapsed().as_secs_f64());
        Some(cached)
    } else {
        None
    };
    let fetch = |j: usize, i: usize| -> Result<Cow<'_, TeacherSample>> {
        match &cache {
            Some(c) => Ok(Cow::Borrowed(&c[j][i])),
            None => teacher_sample(teachers[j], train, i, w.temperature).map(Cow::Owned),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(student.params().len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut grad = vec![0.0; student.params().len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = RunHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        steps: Vec::new(),
        best_epoch: 0,
        wall_time: 0.0,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_seg, mut sum_mid, mut sum_kl, mut sum_total) = (0.0, 0.0, 0.0, 0.0);
        let mut n_steps = 0usize;
        let mut lr = cfg.lr_min;
        for batch in order.chunks(cfg.batch_size) {
            lr = cyclic_lr(step, cfg);
            let b = batch.len() as f64;
            let samples: Vec<Vec<Cow<'_, TeacherSample>>> = batch
                .iter()
                .map(|&i| (0..teachers.len()).map(|j| fetch(j, i)).collect())
                .collect::<Result<_>>()?;
            let teacher_dice: Vec<f64> = (0..teachers.len())
                .map(|j| samples.iter().map(|s| s[j].dice).sum::<f64>() / b)
                .collect();
            let weights = if teachers.is_empty() {
                Vec::new()
            } else {
                weights_from_dice_losses(&teacher_dice, cfg.weighting_mode)?
            };

            grad.fill(0.0);
            let mut losses = BatchLosses::default();
            for (&i, sample) in batch.iter().zip(&samples) {
                let mask = &train.masks[i];
                let target = if teachers.is_empty() {
                    None
                } else {
                    let soft: Vec<&ProbabilityMap> = sample.iter().map(|s| &s.soft).collect();
                    Some(combined_teacher_prediction(&soft, &weights)?)
                };
                let teacher_taps: Vec<&[ReducedTap]> = sample.iter().map(|s| s.taps.as_slice()).collect();
                let kd = target.as_ref().map(|t| KdTarget {
                    soft: t,
                    taps: &teacher_taps,
                    weights: &weights,
                    pairings: &pairings,
                });
                let l = sample_step(&*student, train.images[i].view(), mask, kd, w, b, &mut grad)?;
                losses.seg += l.seg;
                losses.mid += l.mid;
                losses.kl += l.kl;
            }
            let total = kd_total_loss(losses.seg, losses.mid, losses.kl, w)?;
            adam.step(student.params_mut(), &grad, lr);
            history.steps.push(StepRecord {
                step,
                epoch,
                lr,
                seg: losses.seg,
                mid: losses.mid,
                kl: losses.kl,
                total,
                teacher_dice,
                weights,
            });
            sum_seg += losses.seg;
            sum_mid += losses.mid;
            sum_kl += losses.kl;
            sum_total += total;
            n_steps += 1;
            step += 1;
        }

        let val_scores = per_slice_dice(&*student, val)?;
        let val_dice = val_scores.iter().sum::<f64>() / val_scores.len() as f64;
        let n = n_steps as f64;
        let record = EpochRecord {
            epoch,
            seg: sum_seg / n,
            mid: sum_mid / n,
            kl: sum_kl / n,
            total: sum_total / n,
            val_dice,
            lr,
        };
        info!(
            "{} epoch {epoch}/{}: total {:.5} seg {:.5} mid {:.5} kl {:.5} val dice {:.4}",
            student.name(),
            cfg.epochs,
            record.total,
            record.seg,
            record.mid,
            record.kl,
            val_dice
        );
        if best.as_ref().is_none_or(|(d, _)| val_dice > *d) {
            best = Some((val_dice, student.params().to_vec()));
            history.best_epoch = epoch;
        }
        history.epochs.push(record);
    }

    if let Some((_, params)) = best {
        student.params_mut().copy_from_slice(&params);
    }
    history.wall_time = start.elapsed().as_secs_f64();
    Ok(history)
}
