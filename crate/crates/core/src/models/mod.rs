//! Model-adapter interface and the reference encoder-decoder networks.
//!
//! Any segmentation network can take part in distillation as long as it
//! implements [`SegmentationModel`]: logits at input resolution plus a list
//! of named feature taps ordered by depth. Networks that are trained here
//! additionally implement [`TrainableModel`].

mod checkpoint;
mod reference;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use reference::{build_reference_student, build_reference_teacher, ReferenceNet, ReferenceNetConfig};

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tensor::LogitMap;

/// Name and relative depth of one feature tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapInfo {
    pub layer_id: String,
    pub depth_fraction: f64,
}

/// Logits and feature taps of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: LogitMap,
    pub taps: Vec<FeatureMap>,
}

/// Layer description used for parameter and FLOP accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    /// Per-sample, per-channel normalization with affine parameters.
    InstanceNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Upsample,
    Concat,
    /// Anything the counter has no closed form for.
    Other(String),
}

/// One layer with its input and output activation shapes `(C, H, W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

/// A segmentation network usable as a teacher, a student or for evaluation.
///
/// `forward` must be deterministic given parameters and input, and safe to
/// call concurrently on a shared reference.
pub trait SegmentationModel: Send + Sync {
    fn name(&self) -> &str;

    /// Forward a batch `[B, 1, H, W]`; logits come back as `[B, C, H, W]`.
    fn forward(&self, images: &Array4<f64>) -> Result<ModelOutput>;

    fn parameter_count(&self) -> usize;

    fn trainable(&self) -> bool;

    /// Feature taps in increasing depth order.
    fn taps(&self) -> Vec<TapInfo>;

    /// Layer list for a single input of shape `(C, H, W)`.
    fn layer_specs(&self, input: (usize, usize, usize)) -> Result<Vec<LayerSpec>>;
}

/// Upstream gradients returned by a loss closure: one for the logits and one
/// per feature tap (in tap order).
pub type Upstream = (Array3<f64>, Vec<Array3<f64>>);

/// Loss closure handed logits and taps of one sample.
pub type UpstreamFn<'a> = dyn FnMut(&Array3<f64>, &[Array3<f64>]) -> Result<Upstream> + 'a;

/// A network whose parameters live in one flat vector and which can
/// backpropagate a per-sample loss.
pub trait TrainableModel: SegmentationModel {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Forward one image `[1, H, W]`, returning logits `[C, H, W]` and taps.
    fn forward_sample(&self, image: ArrayView3<f64>) -> Result<(Array3<f64>, Vec<Array3<f64>>)>;

    /// Forward one image, hand logits and taps to `upstream`, and accumulate
    /// the parameter gradient of the returned upstream gradients into `grad`.
    fn forward_backward(&self, image: ArrayView3<f64>, upstream: &mut UpstreamFn<'_>, grad: &mut [f64]) -> Result<()>;
}

/// Batched forward built from per-sample passes.
pub(crate) fn batched_forward<M: TrainableModel + ?Sized>(model: &M, images: &Array4<f64>) -> Result<ModelOutput> {
    let (b, c, _, _) = images.dim();
    if c != 1 {
        return Err(Error::shape("[B, 1, H, W]", images.dim()));
    }
    if b == 0 {
        return Err(Error::Empty("image batch"));
    }
    let taps = model.taps();
    let mut logits: Option<Array4<f64>> = None;
    let mut tap_values: Vec<Option<Array4<f64>>> = vec![None; taps.len()];
    for (bi, image) in images.outer_iter().enumerate() {
        let (l, t) = model.forward_sample(image)?;
        let dst = logits.get_or_insert_with(|| Array4::zeros((b, l.shape()[0], l.shape()[1], l.shape()[2])));
        dst.slice_mut(s![bi, .., .., ..]).assign(&l);
        for (slot, tv) in tap_values.iter_mut().zip(t) {
            let dst = slot.get_or_insert_with(|| Array4::zeros((b, tv.shape()[0], tv.shape()[1], tv.shape()[2])));
            dst.index_axis_mut(Axis(0), bi).assign(&tv);
        }
    }
    let logits = LogitMap::new(logits.expect("non-empty batch"))?;
    let taps = taps
        .into_iter()
        .zip(tap_values)
        .map(|(info, v)| FeatureMap::new(v.expect("tap value"), info.layer_id, info.depth_fraction))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelOutput { logits, taps })
}
