//! Intermediate-feature distillation: importance maps, region contrast and
//! the combined Mid loss.
//!
//! Both terms work on the channel-reduced map `A = sum_c f_c^2`, which makes
//! student and teacher taps comparable regardless of channel count. The
//! importance term compares unit-L2 versions of `A` after resampling the
//! student map onto the teacher grid; the contrast term compares the
//! foreground-minus-background mean of the raw `A`.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::BinaryMask;

/// Intermediate activations tapped from one layer, `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array4<f64>,
    pub layer_id: String,
    /// Relative position of the tap in its network, in `[0, 1]`.
    pub depth_fraction: f64,
}

impl FeatureMap {
    pub fn new(values: Array4<f64>, layer_id: impl Into<String>, depth_fraction: f64) -> Result<Self> {
        let (_, _, h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("feature map with empty spatial extent".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        if !(0.0..=1.0).contains(&depth_fraction) {
            return Err(Error::InvalidArgument(format!(
                "depth fraction {depth_fraction} outside [0,1]"
            )));
        }
        Ok(Self {
            values,
            layer_id: layer_id.into(),
            depth_fraction,
        })
    }
}

/// Per-sample unit-L2 spatial attention map, `[B, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub values: Array3<f64>,
    pub layer_id: String,
}

/// Region contrast per sample, `[B, L]` (here `L = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionContrastVector {
    pub values: Array2<f64>,
    pub source_layer: String,
}

impl RegionContrastVector {
    /// Single-sample vector.
    pub fn from_slice(values: &[f64], source_layer: impl Into<String>) -> Self {
        Self {
            values: Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row vector"),
            source_layer: source_layer.into(),
        }
    }
}

/// Student/teacher tap pairs that enter the Mid loss.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPairing {
    pub pairs: Vec<(String, String)>,
}

impl LayerPairing {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Self { pairs }
    }

    /// One pair per student tap, matched to the teacher tap with the nearest
    /// depth fraction (earlier teacher tap wins ties).
    pub fn nearest_depth(student: &[(String, f64)], teacher: &[(String, f64)]) -> Result<Self> {
        if teacher.is_empty() && !student.is_empty() {
            return Err(Error::Pairing("teacher exposes no taps".into()));
        }
        let pairs = student
            .iter()
            .map(|(sid, sf)| {
                let (tid, _) = teacher
                    .iter()
                    .min_by(|a, b| (a.1 - sf).abs().total_cmp(&(b.1 - sf).abs()))
                    .expect("non-empty teacher taps");
                (sid.clone(), tid.clone())
            })
            .collect();
        Ok(Self { pairs })
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Resolves every pair to `(student index, teacher index)`.
    pub fn resolve(&self, student_ids: &[&str], teacher_ids: &[&str]) -> Result<Vec<(usize, usize)>> {
        let s_index = index_ids(student_ids, "student")?;
        let t_index = index_ids(teacher_ids, "teacher")?;
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .map(|(s, t)| {
                if !seen.insert(s.as_str()) {
                    return Err(Error::Pairing(format!("student layer {s} paired twice")));
                }
                let si = *s_index
                    .get(s.as_str())
                    .ok_or_else(|| Error::Pairing(format!("unknown student layer {s}")))?;
                let ti = *t_index
                    .get(t.as_str())
                    .ok_or_else(|| Error::Pairing(format!("unknown teacher layer {t}")))?;
                Ok((si, ti))
            })
            .collect()
    }
}

fn index_ids<'a>(ids: &[&'a str], side: &str) -> Result<HashMap<&'a str, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if map.insert(*id, i).is_some() {
            return Err(Error::Pairing(format!("duplicate {side} layer id {id}")));
        }
    }
    Ok(map)
}

/// Channel-reduced map `sum_c f_c^2`, `[B, H, W]`.
pub fn reduce_channels(values: &Array4<f64>) -> Array3<f64> {
    let (b, _, h, w) = values.dim();
    let mut out = Array3::<f64>::zeros((b, h, w));
    for (mut o, f) in out.outer_iter_mut().zip(values.outer_iter()) {
        for ch in f.outer_iter() {
            Zip::from(&mut o).and(&ch).for_each(|o, &v| *o += v * v);
        }
    }
    out
}

fn normalize_plane(plane: ArrayView2<f64>) -> (Array2<f64>, f64) {
    let norm = crate::tensor::l2_norm(plane);
    if norm > 0.0 {
        (plane.mapv(|v| v / norm), norm)
    } else {
        (plane.to_owned(), 0.0)
    }
}

/// Backward of `y = x / |x|`: `dx = (dy - y (y . dy)) / |x|`.
fn normalize_backward(y: &Array2<f64>, dy: &Array2<f64>, norm: f64) -> Array2<f64> {
    if norm == 0.0 {
        return Array2::zeros(y.raw_dim());
    }
    let dot = (y * dy).sum();
    (dy - &(y * dot)) / norm
}

fn normalize_batch(reduced: &Array3<f64>) -> Array3<f64> {
    let mut out = reduced.clone();
    for (mut o, r) in out.outer_iter_mut().zip(reduced.outer_iter()) {
        o.assign(&normalize_plane(r).0);
    }
    out
}

/// Importance map: channel sum of squares, L2-normalized per sample.
pub fn importance_map(f: &FeatureMap) -> ImportanceMap {
    ImportanceMap {
        values: normalize_batch(&reduce_channels(&f.values)),
        layer_id: f.layer_id.clone(),
    }
}

/// Bilinear resample of an importance map followed by unit-L2
/// renormalization; returns an exact copy when the size already matches.
pub fn align_spatial(m: &ImportanceMap, target_h: usize, target_w: usize) -> Result<ImportanceMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(format!("target size {target_h}x{target_w}")));
    }
    let (b, h, w) = m.values.dim();
    if (h, w) == (target_h, target_w) {
        return Ok(m.clone());
    }
    let mut out = Array3::<f64>::zeros((b, target_h, target_w));
    for (mut o, plane) in out.outer_iter_mut().zip(m.values.outer_iter()) {
        let r = resample::bilinear(plane, target_h, target_w);
        o.assign(&normalize_plane(r.view()).0);
    }
    Ok(ImportanceMap {
        values: out,
        layer_id: m.layer_id.clone(),
    })
}

/// Mean over pairs of the per-sample L1 distance between normalized maps,
/// with each student map resampled to its teacher's resolution.
pub fn importance_loss(
    student_maps: &[ImportanceMap],
    teacher_maps: &[ImportanceMap],
    pairing: &LayerPairing,
) -> Result<f64> {
    let s_ids: Vec<&str> = student_maps.iter().map(|m| m.layer_id.as_str()).collect();
    let t_ids: Vec<&str> = teacher_maps.iter().map(|m| m.layer_id.as_str()).collect();
    let resolved = pairing.resolve(&s_ids, &t_ids)?;
    if resolved.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (si, ti) in &resolved {
        let t = &teacher_maps[*ti].values;
        let s = &student_maps[*si].values;
        if s.shape()[0] != t.shape()[0] {
            return Err(Error::shape(t.shape(), s.shape()));
        }
        let (_, th, tw) = t.dim();
        let aligned = align_spatial(&student_maps[*si], th, tw)?;
        let l1: f64 = Zip::from(&aligned.values)
            .and(t)
            .fold(0.0, |acc, a, b| acc + (a - b).abs());
        total += l1 / t.shape()[0] as f64;
    }
    Ok(total / resolved.len() as f64)
}

fn region_means(reduced: ArrayView2<f64>, mask: ArrayView2<u8>) -> (f64, f64, usize, usize) {
    let (mut fg, mut bg) = (0.0, 0.0);
    let (mut nf, mut nb) = (0usize, 0usize);
    for (&a, &m) in reduced.iter().zip(mask.iter()) {
        if m == 1 {
            fg += a;
            nf += 1;
        } else {
            bg += a;
            nb += 1;
        }
    }
    let mf = if nf > 0 { fg / nf as f64 } else { 0.0 };
    let mb = if nb > 0 { bg / nb as f64 } else { 0.0 };
    (mf, mb, nf, nb)
}

fn contrast_of_reduced(reduced: &Array3<f64>, mask: &BinaryMask) -> Result<Array2<f64>> {
    let (b, h, w) = reduced.dim();
    if mask.batch() != b {
        return Err(Error::shape(b, mask.batch()));
    }
    let m = mask.resize_nearest(h, w);
    let mut out = Array2::<f64>::zeros((b, 1));
    for bi in 0..b {
        let (mf, mb, _, _) = region_means(reduced.index_axis(Axis(0), bi), m.values().index_axis(Axis(0), bi));
        out[[bi, 0]] = mf - mb;
    }
    Ok(out)
}

/// Foreground-minus-background mean of the channel-reduced map. An empty
/// region has mean 0.
pub fn region_contrast_vector(f: &FeatureMap, mask: &BinaryMask) -> Result<RegionContrastVector> {
    Ok(RegionContrastVector {
        values: contrast_of_reduced(&reduce_channels(&f.values), mask)?,
        source_layer: f.layer_id.clone(),
    })
}

/// Mean over samples of `|v_s - v_t|_2`.
pub fn affinity_loss(v_s: &RegionContrastVector, v_t: &RegionContrastVector) -> Result<f64> {
    if v_s.values.dim() != v_t.values.dim() {
        return Err(Error::shape(v_t.values.dim(), v_s.values.dim()));
    }
    let rows = v_s.values.nrows();
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = v_s
        .values
        .outer_iter()
        .zip(v_t.values.outer_iter())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / rows as f64)
}

/// Teacher-side quantities needed by the Mid loss: the channel-reduced map
/// of one tap. The teacher is frozen, so this can be computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTap {
    pub layer_id: String,
    pub reduced: Array3<f64>,
}

impl ReducedTap {
    pub fn from_feature(f: &FeatureMap) -> Self {
        Self {
            layer_id: f.layer_id.clone(),
            reduced: reduce_channels(&f.values),
        }
    }
}

/// Components of one Mid-loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MidTerms {
    pub importance: f64,
    pub affinity: f64,
}

impl MidTerms {
    pub fn total(&self) -> f64 {
        self.importance + self.affinity
    }
}

/// Mid loss: importance term plus mean over pairs of the region-contrast
/// affinity term.
pub fn mid_loss(
    student_feats: &[FeatureMap],
    teacher_feats: &[FeatureMap],
    mask: &BinaryMask,
    pairing: &LayerPairing,
) -> Result<f64> {
    let teacher: Vec<ReducedTap> = teacher_feats.iter().map(ReducedTap::from_feature).collect();
    mid_loss_reduced(student_feats, &teacher, mask, pairing, false).map(|(t, _)| t.total())
}

/// [`mid_loss`] with its gradient with respect to each student feature map
/// (zero for unpaired taps).
pub fn mid_loss_grad(
    student_feats: &[FeatureMap],
    teacher_feats: &[FeatureMap],
    mask: &BinaryMask,
    pairing: &LayerPairing,
) -> Result<(f64, Vec<Array4<f64>>)> {
    let teacher: Vec<ReducedTap> = teacher_feats.iter().map(ReducedTap::from_feature).collect();
    let (terms, grads) = mid_loss_reduced(student_feats, &teacher, mask, pairing, true)?;
    Ok((terms.total(), grads.expect("gradient requested")))
}

/// Shared Mid-loss kernel working from teacher reduced maps.
pub fn mid_loss_reduced(
    student_feats: &[FeatureMap],
    teacher: &[ReducedTap],
    mask: &BinaryMask,
    pairing: &LayerPairing,
    want_grad: bool,
) -> Result<(MidTerms, Option<Vec<Array4<f64>>>)> {
    let s_ids: Vec<&str> = student_feats.iter().map(|f| f.layer_id.as_str()).collect();
    let t_ids: Vec<&str> = teacher.iter().map(|t| t.layer_id.as_str()).collect();
    let resolved = pairing.resolve(&s_ids, &t_ids)?;
    let mut grads: Option<Vec<Array4<f64>>> = want_grad.then(|| {
        student_feats
            .iter()
            .map(|f| Array4::zeros(f.values.raw_dim()))
            .collect()
    });
    if resolved.is_empty() {
        return Ok((MidTerms::default(), grads));
    }
    let n_pairs = resolved.len() as f64;
    let mut terms = MidTerms::default();

    for &(si, ti) in &resolved {
        let sf = &student_feats[si];
        let tr = &teacher[ti].reduced;
        let (b, sh, sw) = (sf.values.shape()[0], sf.values.shape()[2], sf.values.shape()[3]);
        let (tb, th, tw) = tr.dim();
        if b != tb || mask.batch() != b {
            return Err(Error::shape((tb, mask.batch()), b));
        }
        let scale = 1.0 / (b as f64 * n_pairs);
        let s_reduced = reduce_channels(&sf.values);
        let t_contrast = contrast_of_reduced(tr, mask)?;
        let s_mask = mask.resize_nearest(sh, sw);
        let mut d_reduced = Array3::<f64>::zeros((b, sh, sw));

        for bi in 0..b {
            let a_s = s_reduced.index_axis(Axis(0), bi);
            let (n1, norm1) = normalize_plane(a_s);
            let (n2, resized) = if (sh, sw) == (th, tw) {
                (n1.clone(), None)
            } else {
                let r = resample::bilinear(n1.view(), th, tw);
                let (n2, norm2) = normalize_plane(r.view());
                (n2, Some(norm2))
            };
            let (t_norm, _) = normalize_plane(tr.index_axis(Axis(0), bi));
            let l1: f64 = Zip::from(&n2).and(&t_norm).fold(0.0, |acc, a, b| acc + (a - b).abs());
            terms.importance += l1 * scale;

            let sm = s_mask.values().index_axis(Axis(0), bi);
            let (mf, mb, nf, nb) = region_means(a_s, sm);
            let diff = (mf - mb) - t_contrast[[bi, 0]];
            terms.affinity += diff.abs() * scale;

            if want_grad {
                let d_n2 = Zip::from(&n2).and(&t_norm).map_collect(|a, b| sign(a - b) * scale);
                let d_n1 = match resized {
                    None => d_n2,
                    Some(norm2) => {
                        let d_r = normalize_backward(&n2, &d_n2, norm2);
                        resample::bilinear_adjoint(d_r.view(), sh, sw)
                    }
                };
                let mut d_a = normalize_backward(&n1, &d_n1, norm1);
                let g = sign(diff) * scale;
                Zip::from(&mut d_a).and(&sm).for_each(|d, &m| {
                    if m == 1 {
                        *d += g / nf as f64;
                    } else {
                        *d -= g / nb as f64;
                    }
                });
                d_reduced.index_axis_mut(Axis(0), bi).assign(&d_a);
            }
        }

        if let Some(grads) = grads.as_mut() {
            let gf = &mut grads[si];
            for ((mut g_b, f_b), d_b) in gf
                .outer_iter_mut()
                .zip(sf.values.outer_iter())
                .zip(d_reduced.outer_iter())
            {
                for (mut g_c, f_c) in g_b.outer_iter_mut().zip(f_b.outer_iter()) {
                    Zip::from(&mut g_c)
                        .and(&f_c)
                        .and(&d_b)
                        .for_each(|g, &f, &d| *g += 2.0 * f * d);
                }
            }
        }
    }
    Ok((terms, grads))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn fmap(values: Array4<f64>, id: &str) -> FeatureMap {
        FeatureMap::new(values, id, 0.5).unwrap()
    }

    fn imap(v: Array2<f64>, id: &str) -> ImportanceMap {
        let (h, w) = v.dim();
        ImportanceMap {
            values: v.into_shape_with_order((1, h, w)).unwrap(),
            layer_id: id.into(),
        }
    }

    fn one_pair(s: &str, t: &str) -> LayerPairing {
        LayerPairing::new(vec![(s.into(), t.into())])
    }

    #[test]
    fn importance_map_examples() {
        let f = fmap(Array4::from_elem((1, 3, 2, 4), 1.7), "a");
        let m = importance_map(&f);
        let expect = 1.0 / 8f64.sqrt();
        assert!(m.values.iter().all(|&v| (v - expect).abs() < 1e-12));

        let f = fmap(
            array![[1.0, 0.0], [0.0, 0.0]]
                .into_shape_with_order((1, 1, 2, 2))
                .unwrap(),
            "a",
        );
        assert_eq!(importance_map(&f).values, array![[[1.0, 0.0], [0.0, 0.0]]]);
    }

    #[test]
    fn zero_features_give_zero_map() {
        let f = fmap(Array4::zeros((2, 3, 2, 2)), "z");
        assert!(importance_map(&f).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn align_spatial_examples() {
        let m = imap(array![[0.3, 0.1], [0.5, 0.8]], "m");
        assert_eq!(align_spatial(&m, 2, 2).unwrap(), m);

        let uniform = imap(Array2::from_elem((2, 2), 0.5), "u");
        let up = align_spatial(&uniform, 5, 3).unwrap();
        let first = up.values[[0, 0, 0]];
        assert!(up.values.iter().all(|&v| (v - first).abs() < 1e-15));

        assert!(align_spatial(&m, 0, 3).is_err());
    }

    #[test]
    fn align_round_trip_residual() {
        // Align-corners bilinear: 2->4 interpolates between the corners and
        // 4->2 samples the corners back, so the round trip is exact.
        let m = imap(array![[1.0, 0.0], [0.0, 0.0]], "m");
        let up = align_spatial(&m, 4, 4).unwrap();
        let back = align_spatial(&up, 2, 2).unwrap();
        let residual = (&back.values - &m.values).mapv(|v| v * v).sum().sqrt();
        assert!(residual < 1e-12, "residual {residual}");
        assert!(residual <= 0.15);
    }

    #[test]
    fn importance_loss_examples() {
        let a = imap(array![[1.0, 0.0], [0.0, 0.0]], "s");
        let b = imap(array![[0.0, 0.0], [0.0, 1.0]], "t");
        let loss = importance_loss(std::slice::from_ref(&a), &[b], &one_pair("s", "t")).unwrap();
        assert!((loss - 2.0).abs() < 1e-15);

        let same = ImportanceMap {
            layer_id: "t".into(),
            ..a.clone()
        };
        assert_eq!(
            importance_loss(std::slice::from_ref(&a), &[same], &one_pair("s", "t")).unwrap(),
            0.0
        );
        assert_eq!(
            importance_loss(std::slice::from_ref(&a), &[], &LayerPairing::default()).unwrap(),
            0.0
        );
        assert!(matches!(
            importance_loss(&[a], &[], &one_pair("s", "missing")),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn region_contrast_examples() {
        let f = fmap(
            array![[1.0, 2.0], [3.0, 4.0]]
                .into_shape_with_order((1, 1, 2, 2))
                .unwrap(),
            "a",
        );
        let mask = BinaryMask::new(array![[[1u8, 1], [0, 0]]]).unwrap();
        let v = region_contrast_vector(&f, &mask).unwrap();
        assert!((v.values[[0, 0]] + 10.0).abs() < 1e-12);

        let constant = fmap(Array4::from_elem((1, 2, 2, 2), 3.0), "c");
        assert_eq!(region_contrast_vector(&constant, &mask).unwrap().values[[0, 0]], 0.0);

        let all_fg = BinaryMask::new(Array3::ones((1, 2, 2))).unwrap();
        let v = region_contrast_vector(&f, &all_fg).unwrap();
        assert!((v.values[[0, 0]] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn affinity_examples() {
        let a = RegionContrastVector::from_slice(&[3.0], "s");
        let b = RegionContrastVector::from_slice(&[-1.0], "t");
        assert_eq!(affinity_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(affinity_loss(&a, &b).unwrap(), 4.0);
        let c = RegionContrastVector::from_slice(&[1.0, 2.0], "s");
        let d = RegionContrastVector::from_slice(&[0.0, 0.0], "t");
        assert!((affinity_loss(&c, &d).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert!(affinity_loss(&a, &c).is_err());
    }

    #[test]
    fn mid_loss_examples() {
        let mask = BinaryMask::new(array![[[1u8, 0], [0, 1]]]).unwrap();
        let s = fmap(
            array![[1.0, -2.0], [0.5, 4.0]]
                .into_shape_with_order((1, 1, 2, 2))
                .unwrap(),
            "s",
        );
        let t = FeatureMap {
            layer_id: "t".into(),
            ..s.clone()
        };
        assert_eq!(
            mid_loss(std::slice::from_ref(&s), &[t], &mask, &one_pair("s", "t")).unwrap(),
            0.0
        );
        assert_eq!(mid_loss(&[s], &[], &mask, &LayerPairing::default()).unwrap(), 0.0);

        let cs = fmap(Array4::from_elem((1, 2, 2, 2), 1.0), "s");
        let ct = fmap(Array4::from_elem((1, 5, 2, 2), 3.0), "t");
        assert!(mid_loss(&[cs], &[ct], &mask, &one_pair("s", "t")).unwrap().abs() < 1e-15);
    }

    #[test]
    fn pairing_rules() {
        let s = vec![("s0".to_string(), 0.6), ("s1".to_string(), 1.0)];
        let t = vec![
            ("t0".to_string(), 0.2),
            ("t1".to_string(), 0.57),
            ("t2".to_string(), 1.0),
        ];
        let p = LayerPairing::nearest_depth(&s, &t).unwrap();
        assert_eq!(p.pairs, vec![("s0".into(), "t1".into()), ("s1".into(), "t2".into())]);

        let dup = LayerPairing::new(vec![("s0".into(), "t0".into()), ("s0".into(), "t1".into())]);
        assert!(dup.resolve(&["s0"], &["t0", "t1"]).is_err());
    }
}
