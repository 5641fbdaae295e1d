use std::fs;

use ndarray::{Array3, Array4};
use proptest::prelude::*;

use segdistill::eval::{count_params, estimate_flops, layer_macs, layer_params};
use segdistill::models::{
    build_reference_student, build_reference_teacher, load_checkpoint, save_checkpoint, LayerKind, LayerSpec,
    ReferenceNet, ReferenceNetConfig, SegmentationModel, TrainableModel,
};
use segdistill::Error;

fn config() -> impl Strategy<Value = ReferenceNetConfig> {
    (4usize..10, 2usize..5, 2usize..4, any::<u64>()).prop_map(|(base_channels, depth, num_classes, init_seed)| {
        ReferenceNetConfig {
            base_channels,
            depth,
            num_classes,
            tap_stages: vec![depth - 1, 2 * depth - 2],
            init_seed,
        }
    })
}

/// Channel width at each resolution level.
fn widths(cfg: &ReferenceNetConfig) -> Vec<usize> {
    (0..cfg.depth)
        .map(|l| cfg.base_channels * 2usize.pow(l as u32))
        .collect()
}

/// Convolutions as `(cin, cout, k, level)` read off the architecture: two
/// 3×3 convs per encoder level, an upsample-concat and two 3×3 convs per
/// decoder level, then a 1×1 head.
fn conv_list(cfg: &ReferenceNetConfig) -> Vec<(usize, usize, usize, usize)> {
    let c = widths(cfg);
    let mut out = Vec::new();
    for l in 0..cfg.depth {
        out.push((if l == 0 { 1 } else { c[l - 1] }, c[l], 3, l));
        out.push((c[l], c[l], 3, l));
    }
    for l in (0..cfg.depth - 1).rev() {
        out.push((c[l + 1] + c[l], c[l], 3, l));
        out.push((c[l], c[l], 3, l));
    }
    out.push((c[0], cfg.num_classes, 1, 0));
    out
}

fn closed_form_params(cfg: &ReferenceNetConfig) -> usize {
    let convs = conv_list(cfg);
    let n = convs.len();
    convs
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout, k, _))| {
            let norm = if i + 1 < n { 2 * cout } else { 0 };
            cin * cout * k * k + cout + norm
        })
        .sum()
}

/// MACs with each conv followed by norm and ReLU (one MAC per element each),
/// except the head.
fn closed_form_macs(cfg: &ReferenceNetConfig, h: usize, w: usize) -> u64 {
    let mut sizes = vec![(h, w)];
    for l in 1..cfg.depth {
        let (ph, pw) = sizes[l - 1];
        sizes.push((ph / 2, pw / 2));
    }
    let convs = conv_list(cfg);
    let n = convs.len();
    convs
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout, k, l))| {
            let hw = (sizes[l].0 * sizes[l].1) as u64;
            let conv = (cin * cout * k * k) as u64 * hw;
            conv + if i + 1 < n { 2 * cout as u64 * hw } else { 0 }
        })
        .sum()
}

/// Counts conv MACs by walking every output position and kernel tap.
fn brute_conv_macs(spec: &LayerSpec) -> u64 {
    let LayerKind::Conv2d {
        in_channels,
        out_channels,
        kernel,
        groups,
        ..
    } = spec.kind
    else {
        unreachable!()
    };
    let (_, oh, ow) = spec.output;
    let mut n = 0u64;
    for _co in 0..out_channels {
        for _y in 0..oh {
            for _x in 0..ow {
                for _ci in 0..in_channels / groups {
                    for _ky in 0..kernel {
                        for _kx in 0..kernel {
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameter_count_matches_closed_form(cfg in config()) {
        let net = ReferenceNet::new("n", cfg.clone()).unwrap();
        let expect = closed_form_params(&cfg);
        prop_assert_eq!(net.parameter_count(), expect);
        prop_assert_eq!(count_params(&net), expect);
        prop_assert_eq!(net.params().len(), expect);
        let arrays: usize = net.parameter_arrays().iter().map(|(_, n)| n).sum();
        prop_assert_eq!(arrays, expect);
        let specs = net.layer_specs((1, 32, 32)).unwrap();
        let from_specs: usize = specs.iter().map(|l| layer_params(l).unwrap()).sum();
        prop_assert_eq!(from_specs, expect);
    }

    #[test]
    fn flops_match_closed_form(cfg in config(), h in 8usize..40, w in 8usize..40) {
        let net = ReferenceNet::new("n", cfg.clone()).unwrap();
        prop_assert_eq!(estimate_flops(&net, (1, h, w)).unwrap(), 2 * closed_form_macs(&cfg, h, w));
    }
}

#[test]
fn conv_macs_match_brute_force_enumeration() {
    let net = build_reference_student(&ReferenceNetConfig::default_student()).unwrap();
    for spec in net.layer_specs((1, 13, 10)).unwrap() {
        if matches!(spec.kind, LayerKind::Conv2d { .. }) {
            assert_eq!(layer_macs(&spec).unwrap(), brute_conv_macs(&spec), "{}", spec.name);
        }
    }
}

#[test]
fn unknown_layers_fail_the_estimate() {
    let spec = LayerSpec {
        name: "attn".into(),
        kind: LayerKind::Other("attention".into()),
        input: (4, 8, 8),
        output: (4, 8, 8),
    };
    assert!(matches!(layer_macs(&spec), Err(Error::UnknownLayer(_))));
}

#[test]
fn forward_shapes_follow_the_layer_specs() {
    let net = build_reference_teacher(&ReferenceNetConfig::default_teacher()).unwrap();
    let (h, w) = (24, 20);
    let x = Array4::from_shape_fn((2, 1, h, w), |(b, _, y, x)| ((b * 7 + y * 3 + x) % 11) as f64 / 11.0);
    let out = net.forward(&x).unwrap();
    assert_eq!(out.logits.dim(), (2, 2, h, w));
    let specs = net.layer_specs((1, h, w)).unwrap();
    for (tap, info) in out.taps.iter().zip(net.taps()) {
        let last = specs
            .iter()
            .rfind(|s| s.name.starts_with(&format!("{}.relu", info.layer_id)))
            .unwrap();
        let (_, c, th, tw) = tap.values.dim();
        assert_eq!((c, th, tw), last.output, "{}", info.layer_id);
        assert_eq!(tap.layer_id, info.layer_id);
    }
    let ids: Vec<String> = net.taps().into_iter().map(|t| t.layer_id).collect();
    assert_eq!(ids, vec!["enc3", "dec0"]);
    let fractions: Vec<f64> = net.taps().into_iter().map(|t| t.depth_fraction).collect();
    assert!(fractions.windows(2).all(|f| f[0] < f[1]));

    // Batched forward is the per-sample forward, stacked.
    let (single, _) = net.forward_sample(x.index_axis(ndarray::Axis(0), 1)).unwrap();
    let batched = out.logits.values().index_axis(ndarray::Axis(0), 1).to_owned();
    assert_eq!(batched, single);
}

#[test]
fn inputs_too_small_for_the_depth_are_rejected() {
    let net = build_reference_teacher(&ReferenceNetConfig::default_teacher()).unwrap();
    assert!(net.forward(&Array4::zeros((1, 1, 4, 4))).is_err());
    assert!(net.forward(&Array4::zeros((1, 2, 16, 16))).is_err());
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = build_reference_student(&ReferenceNetConfig {
        init_seed: 3,
        ..ReferenceNetConfig::default_student()
    })
    .unwrap();
    net.params_mut()[0] = 0.1 + 0.2;
    net.set_name("s1");
    net.set_trainable(false);
    let path = dir.path().join("nested/s1.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.name(), "s1");
    assert!(!back.trainable());

    let img: Array3<f64> = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| (y * x) as f64 / 225.0);
    assert_eq!(
        net.forward_sample(img.view()).unwrap().0,
        back.forward_sample(img.view()).unwrap().0
    );

    let bytes = fs::read(&path).unwrap();
    for (name, corrupt) in [
        ("magic", [b"XXXXXXXX".as_slice(), &bytes[8..]].concat()),
        ("truncated", bytes[..bytes.len() - 9].to_vec()),
        ("trailer", [&bytes[..bytes.len() - 8], b"CKPT_BAD".as_slice()].concat()),
    ] {
        let p = dir.path().join(name);
        fs::write(&p, corrupt).unwrap();
        assert!(
            matches!(load_checkpoint(&p), Err(Error::CorruptCheckpoint { .. })),
            "{name}"
        );
    }
}

#[test]
fn init_is_seeded() {
    let cfg = ReferenceNetConfig::default_student();
    let a = build_reference_student(&cfg).unwrap();
    let b = build_reference_student(&cfg).unwrap();
    let c = build_reference_student(&ReferenceNetConfig { init_seed: 1, ..cfg }).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}
