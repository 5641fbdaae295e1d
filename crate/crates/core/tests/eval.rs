use ndarray::{Array2, Array3};
use proptest::prelude::*;

use segdistill::data::SliceSet;
use segdistill::eval::{
    dice_score, emit_report, evaluate, export_overlays, mean_std, per_slice_dice, Baselines, Role, REPORT_CSV,
};
use segdistill::models::{build_reference_student, ReferenceNetConfig, SegmentationModel};
use segdistill::BinaryMask;

fn masks(n: usize) -> impl Strategy<Value = (Array3<u8>, Array3<u8>)> {
    (prop::collection::vec(0u8..=1, n), prop::collection::vec(0u8..=1, n)).prop_map(move |(a, b)| {
        (
            Array3::from_shape_vec((1, 1, n), a).unwrap(),
            Array3::from_shape_vec((1, 1, n), b).unwrap(),
        )
    })
}

proptest! {
    #[test]
    fn dice_matches_set_definition((p, g) in masks(30)) {
        let a: Vec<usize> = p.iter().enumerate().filter(|(_, v)| **v == 1).map(|(i, _)| i).collect();
        let b: Vec<usize> = g.iter().enumerate().filter(|(_, v)| **v == 1).map(|(i, _)| i).collect();
        let inter = a.iter().filter(|i| b.contains(i)).count();
        let expect = if a.is_empty() && b.is_empty() { 1.0 } else { 2.0 * inter as f64 / (a.len() + b.len()) as f64 };
        let got = dice_score(&BinaryMask::new(p.clone()).unwrap(), &BinaryMask::new(g.clone()).unwrap()).unwrap();
        prop_assert_eq!(got, expect);
        let swapped = dice_score(&BinaryMask::new(g).unwrap(), &BinaryMask::new(p).unwrap()).unwrap();
        prop_assert_eq!(got, swapped);
    }

    #[test]
    fn mean_std_matches_two_pass(v in prop::collection::vec(0.0..1.0f64, 1..50)) {
        let (m, s) = mean_std(&v).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((m - mean).abs() < 1e-12);
        prop_assert!((s - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn evaluation_report_and_overlays() {
    let images: Vec<Array2<f64>> = (0..3)
        .map(|k| Array2::from_shape_fn((16, 16), |(y, x)| ((y + k) * x % 7) as f64 / 7.0))
        .collect();
    let masks: Vec<Array2<u8>> = (0..3)
        .map(|k| Array2::from_shape_fn((16, 16), |(y, x)| u8::from(y > 4 + k && x > 5)))
        .collect();
    let set = SliceSet::from_arrays(images, masks).unwrap();
    let net = build_reference_student(&ReferenceNetConfig::default_student()).unwrap();
    let r = evaluate(&net, &set, Role::Student).unwrap();
    assert_eq!(r.per_slice, per_slice_dice(&net, &set).unwrap());
    assert_eq!(r.n_samples, 3);
    assert_eq!(r.params, net.parameter_count());
    assert_eq!(r.input_shape, (1, 16, 16));

    let dir = tempfile::tempdir().unwrap();
    let mut baselines = Baselines::new();
    baselines.insert(r.model_name.clone(), 12.5);
    let (csv, txt) = emit_report(std::slice::from_ref(&r), &baselines, dir.path()).unwrap();
    assert_eq!(csv, dir.path().join(REPORT_CSV));
    let body = std::fs::read_to_string(csv).unwrap();
    assert!(body.starts_with("model,role,dice_mean_pct,dice_std,params,flops,baseline,delta_pct"));
    assert!(body.contains("12.50"));
    assert!(txt.exists());

    let files = export_overlays(&net, &set, dir.path().join("ov")).unwrap();
    assert_eq!(files.len(), 3);
    let img = image::open(&files[0]).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (16, 16));
}
