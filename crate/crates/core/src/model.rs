//! Encoder–decoder depth regressor.
//!
//! Layout: 7×7 stride-2 first layer (plain, depthwise separable or channel
//! dropout + conv) → BN → ReLU → residual stages, each opening with a
//! stride-2 block → 3×3 bottleneck conv + BN → `decoder_stages` upsampling
//! modules (each halves channels, doubles resolution) → 3×3 conv to one
//! channel → bilinear resize to the configured output size.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::{self, BnNodes, ConvNodes, Mode, ResidualNodes, ResidualStats, RunningStats, UpProjNodes};
use crate::tensor::{Shape, Tensor};

const STEM_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FirstLayerKind {
    #[default]
    Conv,
    DepthWise,
    ChanDrop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    DeConv2,
    DeConv3,
    UpConv,
    #[default]
    UpProj,
}

impl FromStr for FirstLayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" => Ok(FirstLayerKind::Conv),
            "depthwise" => Ok(FirstLayerKind::DepthWise),
            "chandrop" => Ok(FirstLayerKind::ChanDrop),
            other => Err(Error::Parse(format!(
                "unknown first layer '{other}' (expected conv, depthwise, chandrop)"
            ))),
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deconv2" => Ok(DecoderKind::DeConv2),
            "deconv3" => Ok(DecoderKind::DeConv3),
            "upconv" => Ok(DecoderKind::UpConv),
            "upproj" => Ok(DecoderKind::UpProj),
            other => Err(Error::Parse(format!(
                "unknown decoder '{other}' (expected deconv2, deconv3, upconv, upproj)"
            ))),
        }
    }
}

impl fmt::Display for FirstLayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FirstLayerKind::Conv => "conv",
            FirstLayerKind::DepthWise => "depthwise",
            FirstLayerKind::ChanDrop => "chandrop",
        })
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::DeConv2 => "deconv2",
            DecoderKind::DeConv3 => "deconv3",
            DecoderKind::UpConv => "upconv",
            DecoderKind::UpProj => "upproj",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub first_layer: FirstLayerKind,
    /// 3 (RGB), 1 (sparse depth) or 4 (RGB + sparse depth).
    pub input_channels: usize,
    /// Channel width of each residual stage.
    pub encoder_widths: Vec<usize>,
    /// Residual blocks per stage.
    pub encoder_block_count: usize,
    pub decoder_kind: DecoderKind,
    pub decoder_stages: usize,
    /// `(height, width)` of the prediction; also the expected input size.
    pub output_size: (usize, usize),
    /// Keep probability of the channel-dropout first layer.
    pub chan_drop_p: f64,
}

impl ModelConfig {
    /// Miniature encoder used at desk scale.
    pub fn desk(input_channels: usize, output_size: (usize, usize)) -> Self {
        ModelConfig {
            first_layer: FirstLayerKind::Conv,
            input_channels,
            encoder_widths: vec![16, 32, 64, 128],
            encoder_block_count: 1,
            decoder_kind: DecoderKind::UpProj,
            decoder_stages: 4,
            output_size,
            chan_drop_p: 0.5,
        }
    }

    /// Input extents expected by the model.
    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.input_channels, self.output_size.0, self.output_size.1)
    }

    fn bottleneck_channels(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(0) / 2
    }

    /// Checks the configuration and returns the encoder output extent.
    pub fn validate(&self) -> Result<(usize, usize)> {
        if ![1, 3, 4].contains(&self.input_channels) {
            return invalid(format!("input_channels must be 1, 3 or 4, got {}", self.input_channels));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return invalid("encoder_widths must be a non-empty list of positive widths");
        }
        if self.encoder_block_count == 0 || self.decoder_stages == 0 {
            return invalid("encoder_block_count and decoder_stages must be at least 1");
        }
        if !(self.chan_drop_p > 0.0 && self.chan_drop_p <= 1.0) {
            return invalid(format!("chan_drop_p {} outside (0, 1]", self.chan_drop_p));
        }
        let (mut h, mut w) = self.output_size;
        if h == 0 || w == 0 {
            return invalid("output_size must be positive");
        }
        let halve = |h: usize, w: usize, stage: &str| -> Result<(usize, usize)> {
            if h < 2 || w < 2 {
                return invalid(format!(
                    "{stage}: downsampling a {h}x{w} feature map would drop the spatial size below 1"
                ));
            }
            Ok(((h - 1) / 2 + 1, (w - 1) / 2 + 1))
        };
        (h, w) = halve(h, w, "first layer")?;
        for i in 0..self.encoder_widths.len() {
            (h, w) = halve(h, w, &format!("encoder stage {i}"))?;
        }
        let mut ch = self.bottleneck_channels();
        if ch == 0 {
            return invalid("last encoder width must be at least 2 for the bottleneck");
        }
        let (mut dh, mut dw) = (h, w);
        for i in 0..self.decoder_stages {
            ch /= 2;
            if ch == 0 {
                return invalid(format!("decoder stage {i}: channel count halves to zero"));
            }
            dh *= 2;
            dw *= 2;
        }
        if dh > self.output_size.0 || dw > self.output_size.1 {
            return invalid(format!(
                "decoder output {dh}x{dw} exceeds output size {}x{}",
                self.output_size.0, self.output_size.1
            ));
        }
        Ok((h, w))
    }
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub name: String,
    pub stats: RunningStats,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnSlot {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
enum StemSlot {
    Conv(ConvSlot),
    DepthWise { spatial: usize, pointwise: ConvSlot },
    ChanDrop { p: f64, conv: ConvSlot },
}

#[derive(Clone, Debug)]
struct BlockSlot {
    conv1: ConvSlot,
    bn1: BnSlot,
    conv2: ConvSlot,
    bn2: BnSlot,
    skip: Option<(ConvSlot, BnSlot)>,
}

#[derive(Clone, Debug)]
enum UpSlot {
    DeConv { weight: usize, bias: usize },
    UpConv(ConvSlot),
    UpProj { conv1: ConvSlot, conv2: ConvSlot, skip: ConvSlot },
}

#[derive(Clone, Debug)]
struct Network {
    stem: StemSlot,
    stem_bn: BnSlot,
    blocks: Vec<BlockSlot>,
    bottleneck: ConvSlot,
    bottleneck_bn: BnSlot,
    decoder: Vec<UpSlot>,
    head: ConvSlot,
}

struct Builder<'r> {
    params: Vec<Param>,
    norms: Vec<NormStats>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// He-normal weights, std = √(2 / fan_in).
    fn he(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> usize {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::randn(shape, std, self.rng);
        self.tensor(name, t)
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool) -> ConvSlot {
        self.conv_with_fan_in(name, in_c, out_c, k, stride, pad, bias, in_c * k * k)
    }

    /// 5×5, stride 1, biased conv reading a 2× unpooled map, where only one
    /// input in four is nonzero.
    fn conv_after_unpool(&mut self, name: &str, in_c: usize, out_c: usize) -> ConvSlot {
        self.conv_with_fan_in(name, in_c, out_c, 5, 1, 2, true, in_c * 25 / 4)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_with_fan_in(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        fan_in: usize,
    ) -> ConvSlot {
        let weight = self.he(format!("{name}.weight"), [out_c, in_c, k, k], fan_in);
        let bias = bias.then(|| self.tensor(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1])));
        ConvSlot {
            weight,
            bias,
            stride,
            pad,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnSlot {
        let gamma = self.tensor(format!("{name}.gamma"), Tensor::ones([1, c, 1, 1]));
        let beta = self.tensor(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        self.norms.push(NormStats {
            name: name.to_string(),
            stats: RunningStats::new(c),
        });
        BnSlot {
            gamma,
            beta,
            stats: self.norms.len() - 1,
        }
    }
}

/// Parameters, batch-norm statistics and layer wiring of one network.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    norms: Vec<NormStats>,
    net: Network,
    mode: Mode,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: NodeId,
    /// One node per model parameter, in [`Model::params`] order.
    pub params: Vec<NodeId>,
}

/// Assembles and initializes a model. Deterministic in `seed`; returns a
/// Train-mode model.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        norms: Vec::new(),
        rng: &mut rng,
    };
    let c0 = cfg.encoder_widths[0];
    let (k, s, p) = (STEM_KERNEL, 2, STEM_KERNEL / 2);
    let stem = match cfg.first_layer {
        FirstLayerKind::Conv => StemSlot::Conv(b.conv("stem.conv", cfg.input_channels, c0, k, s, p, false)),
        FirstLayerKind::DepthWise => {
            let spatial = b.he("stem.depthwise.weight".into(), [cfg.input_channels, 1, k, k], k * k);
            let pointwise = b.conv("stem.pointwise", cfg.input_channels, c0, 1, 1, 0, false);
            StemSlot::DepthWise { spatial, pointwise }
        }
        FirstLayerKind::ChanDrop => StemSlot::ChanDrop {
            p: cfg.chan_drop_p,
            conv: b.conv("stem.conv", cfg.input_channels, c0, k, s, p, false),
        },
    };
    let stem_bn = b.bn("stem.bn", c0);

    let mut blocks = Vec::new();
    let mut in_c = c0;
    for (si, &width) in cfg.encoder_widths.iter().enumerate() {
        for bi in 0..cfg.encoder_block_count {
            let name = format!("encoder.{si}.{bi}");
            let stride = if bi == 0 { 2 } else { 1 };
            let conv1 = b.conv(&format!("{name}.conv1"), in_c, width, 3, stride, 1, false);
            let bn1 = b.bn(&format!("{name}.bn1"), width);
            let conv2 = b.conv(&format!("{name}.conv2"), width, width, 3, 1, 1, false);
            let bn2 = b.bn(&format!("{name}.bn2"), width);
            let skip = (stride != 1 || in_c != width).then(|| {
                let c = b.conv(&format!("{name}.skip"), in_c, width, 1, stride, 0, false);
                (c, b.bn(&format!("{name}.skip_bn"), width))
            });
            blocks.push(BlockSlot {
                conv1,
                bn1,
                conv2,
                bn2,
                skip,
            });
            in_c = width;
        }
    }

    let mut ch = cfg.bottleneck_channels();
    let bottleneck = b.conv("bottleneck", in_c, ch, 3, 1, 1, false);
    let bottleneck_bn = b.bn("bottleneck.bn", ch);

    let mut decoder = Vec::new();
    for i in 0..cfg.decoder_stages {
        let name = format!("decoder.{i}");
        let out = ch / 2;
        let slot = match cfg.decoder_kind {
            DecoderKind::DeConv2 | DecoderKind::DeConv3 => {
                let k = if cfg.decoder_kind == DecoderKind::DeConv2 { 2 } else { 3 };
                // Each output pixel of a stride-2 transposed conv sees ~k²/4 taps per input channel.
                let fan_in = (ch * k * k / 4).max(1);
                let weight = b.he(format!("{name}.weight"), [ch, out, k, k], fan_in);
                let bias = b.tensor(format!("{name}.bias"), Tensor::zeros([1, out, 1, 1]));
                UpSlot::DeConv { weight, bias }
            }
            DecoderKind::UpConv => UpSlot::UpConv(b.conv_after_unpool(&format!("{name}.conv"), ch, out)),
            DecoderKind::UpProj => UpSlot::UpProj {
                conv1: b.conv_after_unpool(&format!("{name}.conv1"), ch, out),
                conv2: b.conv(&format!("{name}.conv2"), out, out, 3, 1, 1, true),
                skip: b.conv_after_unpool(&format!("{name}.skip"), ch, out),
            },
        };
        decoder.push(slot);
        ch = out;
    }
    let head = b.conv("head", ch, 1, 3, 1, 1, true);

    let Builder { params, norms, .. } = b;
    Ok(Model {
        config: cfg.clone(),
        params,
        norms,
        net: Network {
            stem,
            stem_bn,
            blocks,
            bottleneck,
            bottleneck_bn,
            decoder,
            head,
        },
        mode: Mode::Train,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norms
    }

    /// Mutable parameter values in [`Model::params`] order.
    pub fn param_values_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces all parameter values; shapes must match.
    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return shape_err(format!("{} values for {} parameters", values.len(), self.params.len()));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return shape_err(format!("parameter {} is {}, got {}", p.name, p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn norm_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.norms.iter_mut().find(|n| n.name == name).map(|n| &mut n.stats)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Runs the network on `input` (a tape node) in the current mode.
    ///
    /// Train mode records parameters as differentiable leaves and updates
    /// batch-norm running statistics; Eval mode records them as constants.
    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape, input: NodeId, rng: &mut R) -> Result<ForwardPass> {
        let mode = self.mode;
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), mode == Mode::Train))
            .collect();
        let output = self.forward_bound(tape, input, &ids, rng)?;
        Ok(ForwardPass { output, params: ids })
    }

    /// Like [`Model::forward`], but with parameters already placed on the
    /// tape by the caller (one node per parameter, in [`Model::params`] order).
    pub fn forward_bound<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        input: NodeId,
        params: &[NodeId],
        rng: &mut R,
    ) -> Result<NodeId> {
        if params.len() != self.params.len() {
            return shape_err(format!("{} parameter nodes for {} parameters", params.len(), self.params.len()));
        }
        for (p, id) in self.params.iter().zip(params) {
            if tape.shape(*id) != p.value.shape() {
                return shape_err(format!("parameter {} is {}, node is {}", p.name, p.value.shape(), tape.shape(*id)));
            }
        }
        run_network(&self.config, &self.net, &mut self.norms, tape, input, params, self.mode, rng)
    }

    /// Eval-mode prediction for a `(N, C, H, W)` input; never mutates the model.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let ids: Vec<NodeId> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut norms = self.norms.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_network(&self.config, &self.net, &mut norms, &mut tape, x, &ids, Mode::Eval, &mut rng)?;
        Ok(tape.value(out).clone())
    }
}

fn conv_nodes(s: &ConvSlot, ids: &[NodeId]) -> ConvNodes {
    ConvNodes {
        weight: ids[s.weight],
        bias: s.bias.map(|b| ids[b]),
        stride: s.stride,
        pad: s.pad,
    }
}

fn bn_nodes(s: &BnSlot, ids: &[NodeId]) -> BnNodes {
    BnNodes {
        gamma: ids[s.gamma],
        beta: ids[s.beta],
    }
}

/// Borrows up to three distinct entries of `norms` mutably.
fn three_stats<'a>(
    norms: &'a mut [NormStats],
    a: usize,
    b: usize,
    c: Option<usize>,
) -> (&'a mut RunningStats, &'a mut RunningStats, Option<&'a mut RunningStats>) {
    let mut it: Vec<Option<&'a mut RunningStats>> = norms.iter_mut().map(|n| Some(&mut n.stats)).collect();
    let ra = it[a].take().expect("distinct bn slots");
    let rb = it[b].take().expect("distinct bn slots");
    let rc = c.map(|c| it[c].take().expect("distinct bn slots"));
    (ra, rb, rc)
}

#[allow(clippy::too_many_arguments)]
fn run_network<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    net: &Network,
    norms: &mut [NormStats],
    tape: &mut Tape,
    input: NodeId,
    ids: &[NodeId],
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    let xs = tape.shape(input);
    if xs.c != cfg.input_channels {
        return shape_err(format!(
            "model expects {} input channels, got input {xs}",
            cfg.input_channels
        ));
    }
    let mut x = match &net.stem {
        StemSlot::Conv(c) => layers::conv2d(tape, input, &conv_nodes(c, ids))?,
        StemSlot::DepthWise { spatial, pointwise } => layers::depthwise_separable_conv(
            tape,
            input,
            ids[*spatial],
            2,
            STEM_KERNEL / 2,
            &conv_nodes(pointwise, ids),
        )?,
        StemSlot::ChanDrop { p, conv } => {
            let d = layers::channel_dropout(tape, input, *p, mode, rng)?;
            layers::conv2d(tape, d, &conv_nodes(conv, ids))?
        }
    };
    x = layers::batch_norm(tape, x, &bn_nodes(&net.stem_bn, ids), &mut norms[net.stem_bn.stats].stats, mode)?;
    x = tape.relu(x);

    for block in &net.blocks {
        let nodes = ResidualNodes {
            conv1: conv_nodes(&block.conv1, ids),
            bn1: bn_nodes(&block.bn1, ids),
            conv2: conv_nodes(&block.conv2, ids),
            bn2: bn_nodes(&block.bn2, ids),
            skip: block.skip.as_ref().map(|(c, b)| (conv_nodes(c, ids), bn_nodes(b, ids))),
        };
        let (bn1, bn2, skip) = three_stats(
            norms,
            block.bn1.stats,
            block.bn2.stats,
            block.skip.as_ref().map(|(_, b)| b.stats),
        );
        x = layers::residual_block(tape, x, &nodes, ResidualStats { bn1, bn2, skip }, mode)?;
    }

    x = layers::conv2d(tape, x, &conv_nodes(&net.bottleneck, ids))?;
    x = layers::batch_norm(
        tape,
        x,
        &bn_nodes(&net.bottleneck_bn, ids),
        &mut norms[net.bottleneck_bn.stats].stats,
        mode,
    )?;

    for up in &net.decoder {
        x = match up {
            UpSlot::DeConv { weight, bias } => {
                let y = layers::transposed_conv2d(tape, x, ids[*weight], Some(ids[*bias]))?;
                tape.relu(y)
            }
            UpSlot::UpConv(c) => layers::up_conv(tape, x, &conv_nodes(c, ids))?,
            UpSlot::UpProj { conv1, conv2, skip } => layers::up_proj(
                tape,
                x,
                &UpProjNodes {
                    conv1: conv_nodes(conv1, ids),
                    conv2: conv_nodes(conv2, ids),
                    skip: conv_nodes(skip, ids),
                },
            )?,
        };
    }
    x = layers::conv2d(tape, x, &conv_nodes(&net.head, ids))?;
    let (oh, ow) = cfg.output_size;
    layers::bilinear_upsample(tape, x, oh, ow)
}
