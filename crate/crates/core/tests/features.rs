use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;

use segdistill::ensemble::{
    adaptive_weights, combined_teacher_prediction, multi_mid_loss, multi_mid_loss_reduced, weights_from_dice_losses,
    WeightingMode,
};
use segdistill::features::{
    affinity_loss, importance_loss, importance_map, mid_loss, mid_loss_grad, region_contrast_vector, FeatureMap,
    LayerPairing, ReducedTap,
};
use segdistill::losses::{kl_distillation_loss, soft_dice_loss, softened_softmax, KlDirection};
use segdistill::{BinaryMask, LogitMap};

fn feats(b: usize, c: usize, h: usize, w: usize) -> impl Strategy<Value = Array4<f64>> {
    prop::collection::vec(-2.0..2.0f64, b * c * h * w)
        .prop_map(move |v| Array4::from_shape_vec((b, c, h, w), v).unwrap())
}

fn mask_strategy(b: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<u8>> {
    prop::collection::vec(0u8..=1, b * h * w).prop_map(move |v| Array3::from_shape_vec((b, h, w), v).unwrap())
}

fn fm(v: &Array4<f64>, id: &str) -> FeatureMap {
    FeatureMap::new(v.clone(), id, 0.5).unwrap()
}

fn pairing(s: &str, t: &str) -> LayerPairing {
    LayerPairing::new(vec![(s.into(), t.into())])
}

fn reduce(f: &Array4<f64>, b: usize) -> Array2<f64> {
    f.index_axis(Axis(0), b)
        .map_axis(Axis(0), |c| c.iter().map(|v| v * v).sum())
}

fn unit(a: &Array2<f64>) -> Array2<f64> {
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        a / n
    } else {
        a.clone()
    }
}

/// Align-corners bilinear interpolation written from the definition.
fn bilinear(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let coord = |i: usize, n_in: usize, n_out: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (fy, fx) = (coord(y, sh, h), coord(x, sw, w));
        let mut acc = 0.0;
        for (yy, wy) in [(fy.floor(), 1.0 - fy.fract()), (fy.floor() + 1.0, fy.fract())] {
            for (xx, wx) in [(fx.floor(), 1.0 - fx.fract()), (fx.floor() + 1.0, fx.fract())] {
                if wy * wx > 0.0 {
                    acc += wy * wx * src[[yy as usize, xx as usize]];
                }
            }
        }
        acc
    })
}

fn nearest_mask(m: &Array3<u8>, b: usize, h: usize, w: usize) -> Array2<u8> {
    let (_, sh, sw) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        m[[
            b,
            ((2 * y + 1) * sh / (2 * h)).min(sh - 1),
            ((2 * x + 1) * sw / (2 * w)).min(sw - 1),
        ]]
    })
}

fn contrast(a: &Array2<f64>, m: &Array2<u8>) -> f64 {
    let mean = |want: u8| {
        let v: Vec<f64> = a
            .iter()
            .zip(m.iter())
            .filter(|(_, &k)| k == want)
            .map(|(v, _)| *v)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(1) - mean(0)
}

/// Per-sample `L1(unit(resize(unit(A_s))), unit(A_t)) + |ΔV_s - ΔV_t|`,
/// averaged over samples.
fn oracle_mid(s: &Array4<f64>, t: &Array4<f64>, m: &Array3<u8>) -> (f64, f64) {
    let (b, _, sh, sw) = s.dim();
    let (_, _, th, tw) = t.dim();
    let (mut imp, mut aff) = (0.0, 0.0);
    for bi in 0..b {
        let a_s = reduce(s, bi);
        let a_t = reduce(t, bi);
        let n_s = if (sh, sw) == (th, tw) {
            unit(&a_s)
        } else {
            unit(&bilinear(&unit(&a_s), th, tw))
        };
        imp += (&n_s - &unit(&a_t)).mapv(f64::abs).sum();
        let cs = contrast(&a_s, &nearest_mask(m, bi, sh, sw));
        let ct = contrast(&a_t, &nearest_mask(m, bi, th, tw));
        aff += (cs - ct).abs();
    }
    (imp / b as f64, aff / b as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn importance_maps_are_unit_and_scale_invariant(f in feats(2, 3, 4, 5), k in 0.1..10.0f64) {
        let m = importance_map(&fm(&f, "a"));
        for plane in m.values.outer_iter() {
            prop_assert!(plane.iter().all(|&v| v >= 0.0));
            let n: f64 = plane.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
        let scaled = importance_map(&fm(&f.mapv(|v| v * k), "a"));
        for (a, b) in m.values.iter().zip(scaled.values.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_loss_matches_oracle(s in feats(2, 2, 4, 4), t in feats(2, 3, 8, 8), m in mask_strategy(2, 8, 8)) {
        let p = pairing("s", "t");
        let got = importance_loss(&[importance_map(&fm(&s, "s"))], &[importance_map(&fm(&t, "t"))], &p).unwrap();
        let (imp, _) = oracle_mid(&s, &t, &m);
        prop_assert!((got - imp).abs() < 1e-12, "{got} vs {imp}");
        prop_assert!((0.0..=2.0 * 8.0).contains(&got));
        let same = importance_loss(&[importance_map(&fm(&t, "s"))], &[importance_map(&fm(&t, "t"))], &p).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn contrast_scales_quadratically(f in feats(2, 2, 4, 4), m in mask_strategy(2, 4, 4), k in 0.1..5.0f64) {
        let mask = BinaryMask::new(m).unwrap();
        let v = region_contrast_vector(&fm(&f, "a"), &mask).unwrap();
        let vk = region_contrast_vector(&fm(&f.mapv(|x| x * k), "a"), &mask).unwrap();
        for (a, b) in v.values.iter().zip(vk.values.iter()) {
            prop_assert!((a * k * k - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        prop_assert_eq!(affinity_loss(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn mid_loss_matches_oracle(s in feats(2, 2, 4, 4), t in feats(2, 3, 8, 8), m in mask_strategy(2, 8, 8)) {
        let mask = BinaryMask::new(m.clone()).unwrap();
        let got = mid_loss(&[fm(&s, "s")], &[fm(&t, "t")], &mask, &pairing("s", "t")).unwrap();
        let (imp, aff) = oracle_mid(&s, &t, &m);
        prop_assert!((got - (imp + aff)).abs() < 1e-10, "{got} vs {}", imp + aff);
    }

    #[test]
    fn mid_gradient_matches_finite_differences(s in feats(1, 2, 4, 4), t in feats(1, 3, 6, 6), m in mask_strategy(1, 6, 6)) {
        let mask = BinaryMask::new(m).unwrap();
        let p = pairing("s", "t");
        let teacher = [fm(&t, "t")];
        let loss = |x: &Array4<f64>| mid_loss(&[fm(x, "s")], &teacher, &mask, &p).unwrap();
        let (_, g) = mid_loss_grad(&[fm(&s, "s")], &teacher, &mask, &p).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (idx, &gv) in g[0].indexed_iter() {
            let mut up = s.clone();
            up[idx] += h;
            let mut dn = s.clone();
            dn[idx] -= h;
            let (lu, l0, ld) = (loss(&up), loss(&s), loss(&dn));
            // Skip points where an absolute value switches sign inside the
            // stencil: one-sided slopes disagree there.
            let kink = ((lu - l0) - (l0 - ld)).abs() > 1e-9;
            if kink {
                continue;
            }
            checked += 1;
            let fd = (lu - ld) / (2.0 * h);
            prop_assert!((fd - gv).abs() < 1e-5 * (1.0 + gv.abs()), "{idx:?}: fd {fd} vs {gv}");
        }
        prop_assert!(checked > 0);
    }

    #[test]
    fn weights_are_proportional_to_dice_losses(d in prop::collection::vec(0.001..1.0f64, 1..6)) {
        let w = weights_from_dice_losses(&d, WeightingMode::AsWritten).unwrap();
        let sum: f64 = d.iter().sum();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (wi, di) in w.iter().zip(&d) {
            prop_assert!(*wi >= 0.0);
            prop_assert!((wi - di / sum).abs() < 1e-12);
        }
        let inv = weights_from_dice_losses(&d, WeightingMode::Inverse).unwrap();
        prop_assert!((inv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_weights_use_teacher_soft_dice(
        z in prop::collection::vec(feats(2, 2, 3, 3), 1..4),
        m in mask_strategy(2, 3, 3),
    ) {
        let mask = BinaryMask::new(m).unwrap();
        let probs: Vec<_> = z.iter().map(|v| softened_softmax(&LogitMap::new(v.clone()).unwrap(), 1.0).unwrap()).collect();
        let w = adaptive_weights(&probs, &mask, WeightingMode::AsWritten).unwrap();
        let d: Vec<f64> = probs.iter().map(|p| soft_dice_loss(p, &mask).unwrap()).collect();
        let sum: f64 = d.iter().sum();
        for (wi, di) in w.iter().zip(&d) {
            prop_assert!((wi - di / sum).abs() < 1e-12);
        }
        let combined = combined_teacher_prediction(&probs, &w).unwrap();
        let sums = combined.values().sum_axis(Axis(1));
        prop_assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        if probs.len() == 1 {
            prop_assert_eq!(&w, &vec![1.0]);
            prop_assert_eq!(combined.values(), probs[0].values());
        }
    }

    #[test]
    fn identical_teachers_reduce_to_one(s in feats(2, 2, 4, 4), t in feats(2, 3, 8, 8), m in mask_strategy(2, 8, 8), n in 1usize..4) {
        let mask = BinaryMask::new(m).unwrap();
        let p = pairing("s", "t");
        let student = [fm(&s, "s")];
        let mono = mid_loss(&student, &[fm(&t, "t")], &mask, &p).unwrap();
        let lists = vec![vec![fm(&t, "t")]; n];
        let w = vec![1.0 / n as f64; n];
        let multi = multi_mid_loss(&student, &lists, &w, &mask, &vec![p.clone(); n]).unwrap();
        prop_assert!((mono - multi).abs() < 1e-12);
        let reduced: Vec<Vec<ReducedTap>> = lists.iter().map(|l| l.iter().map(ReducedTap::from_feature).collect()).collect();
        let (total, per, grads) = multi_mid_loss_reduced(&student, &reduced, &w, &mask, &vec![p; n], true).unwrap();
        prop_assert!((total - multi).abs() < 1e-12);
        prop_assert_eq!(per.len(), n);
        prop_assert!(grads.is_some());
    }
    #[test]
    fn importance_map_ignores_channel_order(f in feats(2, 4, 3, 5), perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle()) {
        let permuted = f.select(Axis(1), &perm);
        let (a, b) = (importance_map(&fm(&f, "a")), importance_map(&fm(&permuted, "a")));
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn contrast_ignores_a_constant_shift_of_the_reduced_map(f in feats(2, 2, 4, 4), m in mask_strategy(2, 4, 4), c in 0.0..25.0f64) {
        // An empty region has mean 0 by convention, which a shift does not preserve.
        for sample in m.outer_iter() {
            prop_assume!(sample.iter().any(|&v| v == 1) && sample.iter().any(|&v| v == 0));
        }
        // An extra channel of sqrt(c) adds exactly c to the channel sum of squares.
        let (b, ch, h, w) = f.dim();
        let mut shifted = Array4::from_elem((b, ch + 1, h, w), c.sqrt());
        shifted.slice_mut(ndarray::s![.., ..ch, .., ..]).assign(&f);
        let mask = BinaryMask::new(m).unwrap();
        let v = region_contrast_vector(&fm(&f, "a"), &mask).unwrap();
        let vs = region_contrast_vector(&fm(&shifted, "a"), &mask).unwrap();
        for (a, b) in v.values.iter().zip(vs.values.iter()) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn mid_loss_is_nonnegative_and_zero_on_itself(s in feats(2, 2, 4, 4), t in feats(2, 3, 8, 8), m in mask_strategy(2, 8, 8)) {
        let mask = BinaryMask::new(m).unwrap();
        let p = pairing("s", "t");
        prop_assert!(mid_loss(&[fm(&s, "s")], &[fm(&t, "t")], &mask, &p).unwrap() >= 0.0);
        let self_pair = LayerPairing::new(vec![("a".into(), "a".into()), ("b".into(), "b".into())]);
        let x = [fm(&s, "a"), fm(&t, "b")];
        prop_assert_eq!(mid_loss(&x, &x, &mask, &self_pair).unwrap(), 0.0);
    }

    #[test]
    fn importance_term_is_bounded_by_the_map_masses(s in feats(1, 2, 4, 4), t in feats(1, 3, 8, 8)) {
        let (ms, mt) = (importance_map(&fm(&s, "s")), importance_map(&fm(&t, "t")));
        let got = importance_loss(std::slice::from_ref(&ms), std::slice::from_ref(&mt), &pairing("s", "t")).unwrap();
        let aligned = segdistill::features::align_spatial(&ms, 8, 8).unwrap();
        let bound = aligned.values.sum() + mt.values.sum();
        prop_assert!(got <= bound + 1e-12);
    }

    #[test]
    fn weights_are_scale_invariant_and_monotone_as_written(d in prop::collection::vec(0.001..1.0f64, 2..6), c in 0.01..100.0f64) {
        let w = weights_from_dice_losses(&d, WeightingMode::AsWritten).unwrap();
        let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
        let ws = weights_from_dice_losses(&scaled, WeightingMode::AsWritten).unwrap();
        for (a, b) in w.iter().zip(&ws) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] > d[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn full_kd_loss_with_identical_teachers_is_the_mono_loss(
        z in feats(2, 2, 8, 8), zt in feats(2, 2, 8, 8),
        s in feats(2, 2, 4, 4), t in feats(2, 3, 8, 8),
        m in mask_strategy(2, 8, 8), n in 2usize..5, temp in 0.5..4.0f64,
    ) {
        let mask = BinaryMask::new(m).unwrap();
        let logits = LogitMap::new(z).unwrap();
        let pt = softened_softmax(&LogitMap::new(zt).unwrap(), temp).unwrap();
        let p = pairing("s", "t");
        let student = [fm(&s, "s")];
        let mono = kl_distillation_loss(&logits, &pt, temp, KlDirection::StudentTeacher).unwrap()
            + mid_loss(&student, &[fm(&t, "t")], &mask, &p).unwrap();
        let teachers = vec![pt.clone(); n];
        let d: Vec<f64> = teachers.iter().map(|q| soft_dice_loss(q, &mask).unwrap()).collect();
        let w = weights_from_dice_losses(&d, WeightingMode::AsWritten).unwrap();
        let combined = combined_teacher_prediction(&teachers, &w).unwrap();
        let multi = kl_distillation_loss(&logits, &combined, temp, KlDirection::StudentTeacher).unwrap()
            + multi_mid_loss(&student, &vec![vec![fm(&t, "t")]; n], &w, &mask, &vec![p; n]).unwrap();
        prop_assert!((mono - multi).abs() < 1e-9, "{mono} vs {multi}");
    }
}

#[test]
fn degenerate_dice_losses_give_uniform_weights() {
    assert_eq!(
        weights_from_dice_losses(&[0.0, 0.0, 0.0, 0.0], WeightingMode::AsWritten).unwrap(),
        vec![0.25; 4]
    );
    assert!(weights_from_dice_losses(&[], WeightingMode::AsWritten).is_err());
    assert!(weights_from_dice_losses(&[0.1, -0.1], WeightingMode::AsWritten).is_err());
}

#[test]
fn mismatched_pairings_are_errors() {
    let f = Array4::from_elem((1, 1, 2, 2), 1.0);
    let mask = BinaryMask::new(Array3::zeros((1, 2, 2))).unwrap();
    assert!(mid_loss(&[fm(&f, "s")], &[fm(&f, "t")], &mask, &pairing("s", "missing")).is_err());
}
