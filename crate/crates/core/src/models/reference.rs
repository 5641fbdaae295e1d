//! Small U-shaped encoder-decoder used as desk-scale teacher and student.
//!
//! Stage layout for depth `D`: encoder blocks `enc0..enc{D-1}` (2×2 max
//! pooling between them, channels doubling from `base_channels`), then
//! decoder blocks `dec{D-2}..dec0`, each upsampling bilinearly to the skip
//! resolution and concatenating the skip. Every block is two 3×3
//! conv + instance norm + ReLU layers; a 1×1 conv head produces the logits. Stage `k`
//! counts blocks in forward order, so there are `2D - 1` stages and stage
//! `k` sits at depth fraction `(k + 1) / (2D - 1)`.

use ndarray::{Array3, Array4, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    batched_forward, LayerKind, LayerSpec, ModelOutput, SegmentationModel, TapInfo, TrainableModel, UpstreamFn,
};
use crate::error::{Error, Result};
use crate::nn::{self, ConvShape, NormCache, NormShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNetConfig {
    pub base_channels: usize,
    /// Number of encoder stages (the last one is the bottleneck).
    pub depth: usize,
    pub num_classes: usize,
    /// Stages (forward block indices) exposed as feature taps.
    pub tap_stages: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

impl ReferenceNetConfig {
    pub fn default_teacher() -> Self {
        Self {
            base_channels: 8,
            depth: 4,
            num_classes: 2,
            tap_stages: vec![3, 6],
            init_seed: 0,
        }
    }

    pub fn default_student() -> Self {
        Self {
            base_channels: 4,
            depth: 3,
            num_classes: 2,
            tap_stages: vec![2, 4],
            init_seed: 0,
        }
    }

    pub fn stage_count(&self) -> usize {
        2 * self.depth - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.tap_stages.is_empty() {
            return Err(Error::Config("at least one tap stage is required".into()));
        }
        if self.tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tap_stages must be strictly increasing".into()));
        }
        if let Some(&s) = self.tap_stages.iter().find(|&&s| s >= self.stage_count()) {
            return Err(Error::Config(format!(
                "tap stage {s} out of range 0..{}",
                self.stage_count()
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn stage_name(&self, stage: usize) -> String {
        if stage < self.depth {
            format!("enc{stage}")
        } else {
            format!("dec{}", 2 * self.depth - 2 - stage)
        }
    }
}

/// Reference encoder-decoder with all parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceNet {
    name: String,
    config: ReferenceNetConfig,
    convs: Vec<ConvShape>,
    /// One per conv except the head, stored after all conv parameters.
    norms: Vec<NormShape>,
    params: Vec<f64>,
    trainable: bool,
}

pub fn build_reference_teacher(cfg: &ReferenceNetConfig) -> Result<ReferenceNet> {
    ReferenceNet::new("reference_teacher", cfg.clone())
}

pub fn build_reference_student(cfg: &ReferenceNetConfig) -> Result<ReferenceNet> {
    ReferenceNet::new("reference_student", cfg.clone())
}

struct ConvCache {
    input: Array3<f64>,
    norm: NormCache,
    out: Array3<f64>,
}

struct BlockCache {
    first: ConvCache,
    second: ConvCache,
}

struct Tape {
    blocks: Vec<BlockCache>,
    /// Pool argmax and input size, one per encoder stage after the first.
    pools: Vec<(Vec<u32>, usize, usize)>,
    /// Spatial size of the tensor each decoder stage upsampled from.
    ups: Vec<(usize, usize)>,
    head_input: Array3<f64>,
}

impl ReferenceNet {
    pub fn new(name: impl Into<String>, config: ReferenceNetConfig) -> Result<Self> {
        config.validate()?;
        let (convs, norms) = layout(&config);
        let mut params = vec![0.0; param_total(&norms)];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        for conv in &convs {
            let fan_in = (conv.cin * conv.kernel * conv.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for w in &mut params[conv.weight_offset..conv.weight_offset + conv.weight_len()] {
                *w = normal.sample(&mut rng);
            }
        }
        for norm in &norms {
            params[norm.gamma_offset..norm.gamma_offset + norm.channels].fill(1.0);
        }
        Ok(Self {
            name: name.into(),
            config,
            convs,
            norms,
            params,
            trainable: true,
        })
    }

    pub(crate) fn from_parts(
        name: String,
        config: ReferenceNetConfig,
        params: Vec<f64>,
        trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        let (convs, norms) = layout(&config);
        let expected = param_total(&norms);
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "config needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            name,
            config,
            convs,
            norms,
            params,
            trainable,
        })
    }

    pub fn config(&self) -> &ReferenceNetConfig {
        &self.config
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Marks the network frozen (teacher) or trainable.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Per-layer trainable array sizes `(name, len)`.
    pub fn parameter_arrays(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), c.weight_len()));
            out.push((format!("conv{i}.bias"), c.cout));
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("norm{i}.gamma"), n.channels));
            out.push((format!("norm{i}.beta"), n.channels));
        }
        out
    }

    fn head(&self) -> &ConvShape {
        self.convs.last().expect("head conv")
    }

    fn run_block(&self, stage: usize, x: ArrayView3<f64>) -> BlockCache {
        let first = self.conv_norm_relu(2 * stage, x);
        let second = self.conv_norm_relu(2 * stage + 1, first.out.view());
        BlockCache { first, second }
    }

    fn conv_norm_relu(&self, layer: usize, x: ArrayView3<f64>) -> ConvCache {
        let (pre, input) = nn::conv_forward(&self.convs[layer], &self.params, x);
        let (mut out, norm) = nn::instance_norm_forward(&self.norms[layer], &self.params, &pre);
        nn::relu_inplace(&mut out);
        ConvCache { input, norm, out }
    }

    fn conv_norm_relu_backward(
        &self,
        layer: usize,
        cache: &ConvCache,
        mut d_out: Array3<f64>,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Array3<f64>> {
        nn::relu_backward_inplace(&cache.out, &mut d_out);
        let d_pre = nn::instance_norm_backward(&self.norms[layer], &self.params, &cache.norm, &d_out, grad);
        nn::conv_backward(
            &self.convs[layer],
            &self.params,
            &cache.input,
            d_pre.view(),
            grad,
            need_input,
        )
    }

    fn run(&self, image: ArrayView3<f64>) -> Result<(Array3<f64>, Tape)> {
        let (c, h, w) = image.dim();
        if c != 1 {
            return Err(Error::shape("[1, H, W]", image.dim()));
        }
        let min = 1usize << (self.config.depth - 1);
        if h < min || w < min {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} smaller than {min}x{min} required by depth {}",
                self.config.depth
            )));
        }
        let depth = self.config.depth;
        let mut blocks = Vec::with_capacity(self.config.stage_count());
        let mut pools = Vec::with_capacity(depth - 1);
        blocks.push(self.run_block(0, image));
        for level in 1..depth {
            let prev = &blocks[level - 1].second.out;
            let (ph, pw) = (prev.shape()[1], prev.shape()[2]);
            let (pooled, arg) = nn::maxpool_forward(prev.view());
            pools.push((arg, ph, pw));
            blocks.push(self.run_block(level, pooled.view()));
        }
        let mut ups = Vec::with_capacity(depth - 1);
        for stage in depth..self.config.stage_count() {
            let level = 2 * depth - 2 - stage;
            let below = &blocks[stage - 1].second.out;
            let skip = &blocks[level].second.out;
            let (sh, sw) = (skip.shape()[1], skip.shape()[2]);
            ups.push((below.shape()[1], below.shape()[2]));
            let up = nn::upsample_forward(below.view(), sh, sw);
            let cat = nn::concat(up.view(), skip.view());
            blocks.push(self.run_block(stage, cat.view()));
        }
        let last = &blocks.last().expect("blocks").second.out;
        let (logits, head_input) = nn::conv_forward(self.head(), &self.params, last.view());
        Ok((
            logits,
            Tape {
                blocks,
                pools,
                ups,
                head_input,
            },
        ))
    }

    fn taps_of(&self, tape: &Tape) -> Vec<Array3<f64>> {
        self.config
            .tap_stages
            .iter()
            .map(|&s| tape.blocks[s].second.out.clone())
            .collect()
    }

    fn block_backward(
        &self,
        stage: usize,
        cache: &BlockCache,
        d_out: Array3<f64>,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let d_mid = self
            .conv_norm_relu_backward(2 * stage + 1, &cache.second, d_out, grad, true)
            .expect("input grad requested");
        self.conv_norm_relu_backward(2 * stage, &cache.first, d_mid, grad, need_input)
    }
}

fn param_total(norms: &[NormShape]) -> usize {
    norms
        .last()
        .map(|n| n.beta_offset + n.channels)
        .expect("at least one norm")
}

fn layout(cfg: &ReferenceNetConfig) -> (Vec<ConvShape>, Vec<NormShape>) {
    let convs = conv_layout(cfg);
    let mut offset = convs.last().map(|c| c.bias_offset + c.cout).unwrap_or(0);
    let norms = convs[..convs.len() - 1]
        .iter()
        .map(|c| {
            let n = NormShape {
                channels: c.cout,
                gamma_offset: offset,
                beta_offset: offset + c.cout,
            };
            offset += 2 * c.cout;
            n
        })
        .collect();
    (convs, norms)
}

fn conv_layout(cfg: &ReferenceNetConfig) -> Vec<ConvShape> {
    let mut shapes = Vec::new();
    let mut offset = 0;
    let mut push = |cin: usize, cout: usize, kernel: usize| {
        let shape = ConvShape {
            cin,
            cout,
            kernel,
            weight_offset: offset,
            bias_offset: offset + cout * cin * kernel * kernel,
        };
        offset += shape.param_len();
        shapes.push(shape);
    };
    let depth = cfg.depth;
    for level in 0..depth {
        let cin = if level == 0 { 1 } else { cfg.channels(level - 1) };
        push(cin, cfg.channels(level), 3);
        push(cfg.channels(level), cfg.channels(level), 3);
    }
    for level in (0..depth - 1).rev() {
        push(cfg.channels(level + 1) + cfg.channels(level), cfg.channels(level), 3);
        push(cfg.channels(level), cfg.channels(level), 3);
    }
    push(cfg.channels(0), cfg.num_classes, 1);
    shapes
}

impl SegmentationModel for ReferenceNet {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, images: &Array4<f64>) -> Result<ModelOutput> {
        batched_forward(self, images)
    }

    fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn trainable(&self) -> bool {
        self.trainable
    }

    fn taps(&self) -> Vec<TapInfo> {
        let n = self.config.stage_count() as f64;
        self.config
            .tap_stages
            .iter()
            .map(|&s| TapInfo {
                layer_id: self.config.stage_name(s),
                depth_fraction: (s + 1) as f64 / n,
            })
            .collect()
    }

    fn layer_specs(&self, input: (usize, usize, usize)) -> Result<Vec<LayerSpec>> {
        let (c, h, w) = input;
        if c != 1 {
            return Err(Error::shape("(1, H, W)", input));
        }
        let depth = self.config.depth;
        let mut specs = Vec::new();
        let conv = |name: String, shape: &ConvShape, h: usize, w: usize| LayerSpec {
            name,
            kind: LayerKind::Conv2d {
                in_channels: shape.cin,
                out_channels: shape.cout,
                kernel: shape.kernel,
                stride: 1,
                padding: shape.kernel / 2,
                groups: 1,
                bias: true,
            },
            input: (shape.cin, h, w),
            output: (shape.cout, h, w),
        };
        let relu = |name: String, c: usize, h: usize, w: usize| LayerSpec {
            name,
            kind: LayerKind::Relu,
            input: (c, h, w),
            output: (c, h, w),
        };
        let mut sizes = vec![(h, w)];
        for level in 1..depth {
            let (ph, pw) = sizes[level - 1];
            sizes.push((ph / 2, pw / 2));
        }
        for stage in 0..self.config.stage_count() {
            let name = self.config.stage_name(stage);
            let level = if stage < depth { stage } else { 2 * depth - 2 - stage };
            let (sh, sw) = sizes[level];
            if stage > 0 && stage < depth {
                let (ph, pw) = sizes[level - 1];
                let ch = self.config.channels(level - 1);
                specs.push(LayerSpec {
                    name: format!("{name}.pool"),
                    kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
                    input: (ch, ph, pw),
                    output: (ch, sh, sw),
                });
            }
            if stage >= depth {
                let (bh, bw) = sizes[level + 1];
                let cb = self.config.channels(level + 1);
                let cs = self.config.channels(level);
                specs.push(LayerSpec {
                    name: format!("{name}.up"),
                    kind: LayerKind::Upsample,
                    input: (cb, bh, bw),
                    output: (cb, sh, sw),
                });
                specs.push(LayerSpec {
                    name: format!("{name}.cat"),
                    kind: LayerKind::Concat,
                    input: (cb, sh, sw),
                    output: (cb + cs, sh, sw),
                });
            }
            for (j, shape) in self.convs[2 * stage..2 * stage + 2].iter().enumerate() {
                specs.push(conv(format!("{name}.conv{j}"), shape, sh, sw));
                specs.push(LayerSpec {
                    name: format!("{name}.norm{j}"),
                    kind: LayerKind::InstanceNorm { channels: shape.cout },
                    input: (shape.cout, sh, sw),
                    output: (shape.cout, sh, sw),
                });
                specs.push(relu(format!("{name}.relu{j}"), shape.cout, sh, sw));
            }
        }
        specs.push(conv("head".into(), self.head(), h, w));
        Ok(specs)
    }
}

impl TrainableModel for ReferenceNet {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_sample(&self, image: ArrayView3<f64>) -> Result<(Array3<f64>, Vec<Array3<f64>>)> {
        let (logits, tape) = self.run(image)?;
        Ok((logits, self.taps_of(&tape)))
    }

    fn forward_backward(&self, image: ArrayView3<f64>, upstream: &mut UpstreamFn<'_>, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), grad.len()));
        }
        let (logits, tape) = self.run(image)?;
        let taps = self.taps_of(&tape);
        let (d_logits, d_taps) = upstream(&logits, &taps)?;
        if d_logits.dim() != logits.dim() || d_taps.len() != taps.len() {
            return Err(Error::shape(logits.dim(), d_logits.dim()));
        }

        let depth = self.config.depth;
        let stages = self.config.stage_count();
        let mut d_block: Vec<Option<Array3<f64>>> = vec![None; stages];
        let add = |slot: &mut Option<Array3<f64>>, g: Array3<f64>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };
        for (&stage, g) in self.config.tap_stages.iter().zip(d_taps) {
            add(&mut d_block[stage], g);
        }

        let d_last = nn::conv_backward(self.head(), &self.params, &tape.head_input, d_logits.view(), grad, true)
            .expect("input grad requested");
        add(&mut d_block[stages - 1], d_last);

        for stage in (depth..stages).rev() {
            let level = 2 * depth - 2 - stage;
            let d_out = d_block[stage].take().expect("decoder gradient");
            let d_cat = self
                .block_backward(stage, &tape.blocks[stage], d_out, grad, true)
                .expect("input grad requested");
            let c_up = self.config.channels(level + 1);
            let (d_up, d_skip) = nn::split(d_cat.view(), c_up);
            let (bh, bw) = tape.ups[stage - depth];
            add(&mut d_block[stage - 1], nn::upsample_backward(d_up.view(), bh, bw));
            add(&mut d_block[level], d_skip);
        }
        for level in (0..depth).rev() {
            let d_out = d_block[level].take().expect("encoder gradient");
            let d_in = self.block_backward(level, &tape.blocks[level], d_out, grad, level > 0);
            if level > 0 {
                let (arg, ph, pw) = &tape.pools[level - 1];
                let d_prev = nn::maxpool_backward(d_in.expect("input grad").view(), arg, *ph, *pw);
                add(&mut d_block[level - 1], d_prev);
            }
        }
        Ok(())
    }
}
