//! Closed-form parameter and multiply-accumulate counts per layer.
//!
//! Conventions: a convolution costs `C_in·C_out·k²·H_out·W_out / groups`
//! MACs (padding taps included, bias excluded), a linear layer
//! `in·out` per output position, normalization layers and ReLU one MAC per
//! output element. Pooling, upsampling and concatenation are free. FLOPs are
//! `2 × MACs`.

use crate::error::{Error, Result};
use crate::models::{LayerKind, LayerSpec, SegmentationModel};

fn numel(shape: (usize, usize, usize)) -> u64 {
    (shape.0 * shape.1 * shape.2) as u64
}

pub fn layer_macs(layer: &LayerSpec) -> Result<u64> {
    let (_, oh, ow) = layer.output;
    Ok(match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            groups,
            ..
        } => {
            check_groups(layer, *in_channels, *out_channels, *groups)?;
            (in_channels * out_channels * kernel * kernel / groups) as u64 * (oh * ow) as u64
        }
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => (in_features * out_features) as u64 * (oh * ow) as u64,
        LayerKind::BatchNorm { .. } | LayerKind::InstanceNorm { .. } | LayerKind::Relu => numel(layer.output),
        LayerKind::MaxPool { .. } | LayerKind::Upsample | LayerKind::Concat => 0,
        LayerKind::Other(kind) => return Err(Error::UnknownLayer(format!("{} ({kind})", layer.name))),
    })
}

pub fn layer_params(layer: &LayerSpec) -> Result<usize> {
    Ok(match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            groups,
            bias,
            ..
        } => {
            check_groups(layer, *in_channels, *out_channels, *groups)?;
            out_channels * (in_channels / groups) * kernel * kernel + if *bias { *out_channels } else { 0 }
        }
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
        } => in_features * out_features + if *bias { *out_features } else { 0 },
        LayerKind::BatchNorm { channels } | LayerKind::InstanceNorm { channels } => 2 * channels,
        LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Upsample | LayerKind::Concat => 0,
        LayerKind::Other(kind) => return Err(Error::UnknownLayer(format!("{} ({kind})", layer.name))),
    })
}

fn check_groups(layer: &LayerSpec, cin: usize, cout: usize, groups: usize) -> Result<()> {
    if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!(
            "{}: {cin}->{cout} channels not divisible into {groups} groups",
            layer.name
        )));
    }
    Ok(())
}

/// Exact trainable-scalar count reported by the model.
pub fn count_params(model: &dyn SegmentationModel) -> usize {
    model.parameter_count()
}

/// `2 × MACs` summed over the model's layers for one input of shape
/// `(C, H, W)`. Fails on any layer without a closed form.
pub fn estimate_flops(model: &dyn SegmentationModel, input: (usize, usize, usize)) -> Result<u64> {
    let specs = model.layer_specs(input)?;
    let mut unknown = Vec::new();
    let mut macs = 0u64;
    for layer in &specs {
        match layer_macs(layer) {
            Ok(m) => macs += m,
            Err(Error::UnknownLayer(name)) => unknown.push(name),
            Err(e) => return Err(e),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownLayer(unknown.join(", ")));
    }
    Ok(2 * macs)
}
