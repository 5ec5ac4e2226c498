//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate value. Each operation appends one node
//! whose inputs are strictly earlier nodes, so the node list is already in
//! topological order and a single reverse sweep computes all gradients.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::losses::{self, LossKind};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of recorded values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Full `f64` arithmetic.
    #[default]
    Double,
    /// Every recorded value is rounded to the nearest `f32`.
    Single,
}

impl Precision {
    pub fn round(self, t: &mut Tensor) {
        if self == Precision::Single {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    DepthwiseConv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Crop(NodeId),
    Unpool2x(NodeId),
    Bilinear(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ChannelMask {
        x: NodeId,
        keep: Vec<bool>,
    },
    /// Loss gradient w.r.t. `pred` is computed eagerly during the forward pass.
    Loss {
        pred: NodeId,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over `(N, H, W)`.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    kinks: Option<Vec<u64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Tape::default()
        }
    }

    /// Makes non-smooth operations record which branch each element took.
    /// Used by [`grad_check`] to skip coordinates whose stencil crosses a kink.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    pub fn kink_signature(&self) -> &[u64] {
        self.kinks.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        self.precision.round(&mut value);
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record_kinks(&mut self, bits: impl Iterator<Item = u8>) {
        if let Some(k) = self.kinks.as_mut() {
            // FNV-1a over the branch codes.
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in bits {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            k.push(h);
        }
    }

    /// Adds an input tensor. Gradients are reported for it iff `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        self.precision.round(&mut value);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add {} + {}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("mul {} * {}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        if self.kinks.is_some() {
            let bits: Vec<u8> = self.value(a).data().iter().map(|&v| (v > 0.0) as u8).collect();
            self.record_kinks(bits.into_iter());
        }
        self.push(out, Op::Relu(a), &[a])
    }

    /// Zero-padded cross-correlation. `w` is `(out_c, in_c, kh, kw)`, `b` is `(1, out_c, 1, 1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c {
            return shape_err(format!("conv2d weights {ws} expect {} input channels, got {xs}", ws.c));
        }
        check_bias(self, b, ws.n)?;
        let geom = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad).ok_or_else(|| {
            Error::Shape(format!("conv2d kernel {}x{} stride {stride} pad {pad} does not fit input {xs}", ws.h, ws.w))
        })?;
        let out_shape = Shape::new(xs.n, ws.n, geom.out_h, geom.out_w);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let out_len = out_shape.sample_len();
            out.data_mut()
                .par_chunks_mut(out_len)
                .enumerate()
                .for_each(|(n, o)| kernels::conv_forward(xv.sample(n), wv, bv, ws.n, &geom, o));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Per-channel spatial convolution. `w` is `(c, 1, kh, kw)`; no bias.
    pub fn depthwise_conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.c != 1 {
            return shape_err(format!("depthwise weights {ws} do not match input {xs}"));
        }
        let geom = ConvGeom::new(1, xs.h, xs.w, ws.h, ws.w, stride, pad)
            .ok_or_else(|| Error::Shape(format!("depthwise kernel does not fit input {xs}")))?;
        let out_shape = Shape::new(xs.n, xs.c, geom.out_h, geom.out_w);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let kk = ws.h * ws.w;
            let out_plane = out_shape.plane();
            out.data_mut()
                .par_chunks_mut(out_plane)
                .enumerate()
                .for_each(|(i, o)| {
                    let (n, c) = (i / xs.c, i % xs.c);
                    kernels::conv_forward(xv.plane(n, c), &wv[c * kk..(c + 1) * kk], None, 1, &geom, o)
                });
        }
        Ok(self.push(out, Op::DepthwiseConv2d { x, w, geom }, &[x, w]))
    }

    /// Transposed convolution with zero padding. `w` is `(in_c, out_c, kh, kw)`.
    /// Output extent is `(H-1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c {
            return shape_err(format!("transposed conv weights {ws} expect {} input channels, got {xs}", ws.n));
        }
        if stride == 0 || xs.h == 0 || xs.w == 0 {
            return invalid("transposed conv needs stride >= 1 and a non-empty input");
        }
        check_bias(self, b, ws.c)?;
        let out_h = (xs.h - 1) * stride + ws.h;
        let out_w = (xs.w - 1) * stride + ws.w;
        let geom = ConvGeom::new(ws.c, out_h, out_w, ws.h, ws.w, stride, 0).expect("kernel fits by construction");
        debug_assert_eq!((geom.out_h, geom.out_w), (xs.h, xs.w));
        let out_shape = Shape::new(xs.n, ws.c, out_h, out_w);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            out.data_mut()
                .par_chunks_mut(out_shape.sample_len())
                .enumerate()
                .for_each(|(n, o)| kernels::conv_transpose_forward(xv.sample(n), wv, bv, xs.c, &geom, o));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if h > xs.h || w > xs.w {
            return shape_err(format!("crop {h}x{w} larger than {xs}"));
        }
        let out_shape = Shape::new(xs.n, xs.c, h, w);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let p = xv.plane(n, c);
                for y in 0..h {
                    data.extend_from_slice(&p[y * xs.w..y * xs.w + w]);
                }
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Crop(x), &[x]))
    }

    /// Doubles spatial size, placing each value at the top-left of its 2×2 block.
    pub fn unpool2x(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let out_shape = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
        let mut out = Tensor::zeros(out_shape);
        let xv = self.value(x);
        for n in 0..xs.n {
            for c in 0..xs.c {
                for y in 0..xs.h {
                    for xx in 0..xs.w {
                        out.set(n, c, 2 * y, 2 * xx, xv.get(n, c, y, xx));
                    }
                }
            }
        }
        self.push(out, Op::Unpool2x(x), &[x])
    }

    /// Align-corners bilinear resize to a size no smaller than the input.
    pub fn bilinear_upsample(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if out_h < xs.h || out_w < xs.w {
            return invalid(format!("bilinear upsample to {out_h}x{out_w} is smaller than input {xs}"));
        }
        let out_shape = Shape::new(xs.n, xs.c, out_h, out_w);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let plane = out_shape.plane();
            out.data_mut().chunks_mut(plane).enumerate().for_each(|(i, o)| {
                kernels::bilinear_plane(xv.plane(i / xs.c, i % xs.c), xs.h, xs.w, out_h, out_w, o)
            });
        }
        Ok(self.push(out, Op::Bilinear(x), &[x]))
    }

    /// Batch normalization using the statistics of this batch. `gamma`/`beta` are `(1, C, 1, 1)`.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchStats)> {
        let xs = self.shape(x);
        check_affine(self, gamma, beta, xs.c)?;
        let count = xs.n * xs.plane();
        if count < 2 {
            return invalid(format!(
                "batch norm in training mode needs more than one element per channel, input is {xs}"
            ));
        }
        let xv = self.value(x);
        let mut mean = vec![0.0; xs.c];
        let mut var = vec![0.0; xs.c];
        for c in 0..xs.c {
            let s: f64 = (0..xs.n).map(|n| xv.plane(n, c).iter().sum::<f64>()).sum();
            let m = s / count as f64;
            let ss: f64 = (0..xs.n)
                .map(|n| xv.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum();
            mean[c] = m;
            var[c] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        Ok((id, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        check_affine(self, gamma, beta, xs.c)?;
        if mean.len() != xs.c || var.len() != xs.c {
            return shape_err(format!("running statistics do not match {} channels", xs.c));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn affine_normalize(&self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f64], inv_std: &[f64]) -> Tensor {
        let xv = self.value(x);
        let xs = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xv.clone();
        let plane = xs.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % xs.c;
            for v in chunk {
                *v = g[c] * (*v - mean[c]) * inv_std[c] + b[c];
            }
        }
        out
    }

    /// Multiplies whole channels by 0 or 1. `keep` has one entry per `(n, c)`.
    pub fn channel_mask(&mut self, x: NodeId, keep: Vec<bool>) -> Result<NodeId> {
        let xs = self.shape(x);
        if keep.len() != xs.n * xs.c {
            return shape_err(format!("channel mask of length {} for input {xs}", keep.len()));
        }
        let mut out = self.value(x).clone();
        let plane = xs.plane();
        for (chunk, &k) in out.data_mut().chunks_mut(plane).zip(&keep) {
            if !k {
                chunk.fill(0.0);
            }
        }
        Ok(self.push(out, Op::ChannelMask { x, keep }, &[x]))
    }

    /// Scalar training loss of `pred` against a fixed target over the masked pixels.
    pub fn masked_loss(&mut self, pred: NodeId, target: &Tensor, mask: &[bool], kind: LossKind) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return shape_err(format!("loss prediction {} vs target {}", pv.shape(), target.shape()));
        }
        if mask.len() != pv.numel() {
            return shape_err(format!("mask of length {} for prediction {}", mask.len(), pv.shape()));
        }
        let eval = losses::evaluate(kind, pv.data(), target.data(), mask)?;
        if self.kinks.is_some() {
            let branches = eval.branches;
            self.record_kinks(branches.into_iter());
        }
        Ok(self.push(
            Tensor::scalar(eval.value),
            Op::Loss {
                pred,
                grad: eval.grad,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != Shape::SCALAR {
            return Err(Error::NonScalarLoss(ls.dims()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            out.push(if leaf {
                Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &id in [a, b] {
                    if wants(id) {
                        accumulate(grads, id, dy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let g = zip_map(dy, vb, |d, y| d * y);
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let g = zip_map(dy, va, |d, x| d * x);
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, dy.map(|d| d * k)),
            Op::Sum(a) => {
                let s = self.shape(*a);
                accumulate(grads, *a, Tensor::full(s, dy.item()));
            }
            Op::Relu(a) => {
                let g = zip_map(dy, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                accumulate(grads, *a, g);
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let out_c = wv.shape().n;
                let n = xv.shape().n;
                if wants(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    let len = xv.shape().sample_len();
                    dx.data_mut().par_chunks_mut(len).enumerate().for_each(|(i, d)| {
                        kernels::conv_backward_input(dy.sample(i), wv.data(), out_c, geom, d)
                    });
                    accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let parts: Vec<Vec<f64>> = (0..n)
                        .into_par_iter()
                        .map(|i| {
                            let mut dw = vec![0.0; wv.numel()];
                            kernels::conv_backward_weight(xv.sample(i), dy.sample(i), out_c, geom, &mut dw);
                            dw
                        })
                        .collect();
                    accumulate(grads, *w, sum_parts(wv.shape(), parts));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        accumulate(grads, *b, channel_sums(dy));
                    }
                }
            }
            Op::DepthwiseConv2d { x, w, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let kk = wv.shape().plane();
                let planes = xs.n * xs.c;
                if wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    dx.data_mut().par_chunks_mut(xs.plane()).enumerate().for_each(|(i, d)| {
                        let c = i % xs.c;
                        kernels::conv_backward_input(dy.plane(i / xs.c, c), &wv.data()[c * kk..(c + 1) * kk], 1, geom, d)
                    });
                    accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let parts: Vec<Vec<f64>> = (0..planes)
                        .into_par_iter()
                        .map(|i| {
                            let mut dk = vec![0.0; kk];
                            let (n, c) = (i / xs.c, i % xs.c);
                            kernels::conv_backward_weight(xv.plane(n, c), dy.plane(n, c), 1, geom, &mut dk);
                            dk
                        })
                        .collect();
                    let mut dw = Tensor::zeros(wv.shape());
                    for (i, part) in parts.iter().enumerate() {
                        let c = i % xs.c;
                        for (a, b) in dw.data_mut()[c * kk..(c + 1) * kk].iter_mut().zip(part) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *w, dw);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // Forward is the input-gradient of `geom`'s convolution, so the
                // backward is that convolution itself.
                let xv = self.value(*x);
                let wv = self.value(*w);
                let in_c = wv.shape().n;
                let n = xv.shape().n;
                if wants(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    let len = xv.shape().sample_len();
                    dx.data_mut().par_chunks_mut(len).enumerate().for_each(|(i, d)| {
                        kernels::conv_forward(dy.sample(i), wv.data(), None, in_c, geom, d)
                    });
                    accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let parts: Vec<Vec<f64>> = (0..n)
                        .into_par_iter()
                        .map(|i| {
                            let mut dw = vec![0.0; wv.numel()];
                            kernels::conv_backward_weight(dy.sample(i), xv.sample(i), in_c, geom, &mut dw);
                            dw
                        })
                        .collect();
                    accumulate(grads, *w, sum_parts(wv.shape(), parts));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        accumulate(grads, *b, channel_sums(dy));
                    }
                }
            }
            Op::Crop(x) => {
                let xs = self.shape(*x);
                let ds = dy.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for y in 0..ds.h {
                            for xx in 0..ds.w {
                                dx.set(n, c, y, xx, dy.get(n, c, y, xx));
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Unpool2x(x) => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for y in 0..xs.h {
                            for xx in 0..xs.w {
                                dx.set(n, c, y, xx, dy.get(n, c, 2 * y, 2 * xx));
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Bilinear(x) => {
                let xs = self.shape(*x);
                let ds = dy.shape();
                let mut dx = Tensor::zeros(xs);
                dx.data_mut().chunks_mut(xs.plane()).enumerate().for_each(|(i, d)| {
                    kernels::bilinear_plane_backward(dy.plane(i / xs.c, i % xs.c), xs.h, xs.w, ds.h, ds.w, d)
                });
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let xs = xv.shape();
                let g = self.value(*gamma).data();
                let plane = xs.plane();
                let count = (xs.n * plane) as f64;
                let mut sum_dy = vec![0.0; xs.c];
                let mut sum_dy_xhat = vec![0.0; xs.c];
                for i in 0..xs.n * xs.c {
                    let c = i % xs.c;
                    let xp = &xv.data()[i * plane..(i + 1) * plane];
                    let dp = &dy.data()[i * plane..(i + 1) * plane];
                    for (xv, d) in xp.iter().zip(dp) {
                        let xhat = (xv - mean[c]) * inv_std[c];
                        sum_dy[c] += d;
                        sum_dy_xhat[c] += d * xhat;
                    }
                }
                if wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let c = i % xs.c;
                        let xp = &xv.data()[i * plane..(i + 1) * plane];
                        let dp = &dy.data()[i * plane..(i + 1) * plane];
                        let k = g[c] * inv_std[c];
                        for ((o, xv), d) in chunk.iter_mut().zip(xp).zip(dp) {
                            *o = if *batch_stats {
                                let xhat = (xv - mean[c]) * inv_std[c];
                                k * (d - sum_dy[c] / count - xhat * sum_dy_xhat[c] / count)
                            } else {
                                k * d
                            };
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                let cshape = Shape::new(1, xs.c, 1, 1);
                if wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(cshape, sum_dy_xhat).expect("C values"));
                }
                if wants(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(cshape, sum_dy).expect("C values"));
                }
            }
            Op::ChannelMask { x, keep } => {
                let mut dx = dy.clone();
                let plane = dx.shape().plane();
                for (chunk, &k) in dx.data_mut().chunks_mut(plane).zip(keep) {
                    if !k {
                        chunk.fill(0.0);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Loss { pred, grad } => {
                let s = dy.item();
                let data = grad.iter().map(|g| g * s).collect();
                let g = Tensor::from_vec(self.shape(*pred), data).expect("loss gradient matches prediction");
                accumulate(grads, *pred, g);
            }
        }
    }
}

fn check_bias(tape: &Tape, b: Option<NodeId>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        let bs = tape.shape(b);
        if bs.numel() != channels {
            return shape_err(format!("bias {bs} does not match {channels} output channels"));
        }
    }
    Ok(())
}

fn check_affine(tape: &Tape, gamma: NodeId, beta: NodeId, channels: usize) -> Result<()> {
    let (gs, bs) = (tape.shape(gamma), tape.shape(beta));
    if gs.numel() != channels || bs.numel() != channels {
        return shape_err(format!("batch norm affine {gs}/{bs} does not match {channels} channels"));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes agree"),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn sum_parts(shape: Shape, parts: Vec<Vec<f64>>) -> Tensor {
    let mut total = vec![0.0; shape.numel()];
    for part in parts {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    Tensor::from_vec(shape, total).expect("parts sized from shape")
}

fn channel_sums(dy: &Tensor) -> Tensor {
    let s = dy.shape();
    let mut out = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            *o += dy.plane(n, c).iter().sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), out).expect("C values")
}

/// Gradients of one backward sweep, keyed by leaf node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a `requires_grad` leaf; zero-filled if the leaf did not
    /// influence the loss. `None` for other nodes.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates excluded because a perturbation changed a branch of a
    /// non-smooth operation.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Branch changes within `kink_radius · eps` exclude a coordinate.
    pub kink_radius: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            kink_radius: 10.0,
            max_coords: None,
        }
    }
}

/// Compares analytic gradients of a scalar function with central differences.
///
/// Error per coordinate is `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with(
        f,
        inputs,
        &GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) {
        return invalid("grad_check eps must be positive");
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return invalid("grad_check inputs must be finite");
    }
    let run = |values: &[Tensor]| -> Result<(f64, Vec<u64>)> {
        let mut tape = Tape::new();
        tape.track_kinks();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &ids)?;
        if tape.shape(out) != Shape::SCALAR {
            return Err(Error::NonScalarLoss(tape.shape(out).dims()));
        }
        Ok((tape.value(out).item(), tape.kink_signature().to_vec()))
    };

    let mut tape = Tape::new();
    tape.track_kinks();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let base_sig = tape.kink_signature().to_vec();
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut values = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("inputs are requires_grad leaves");
        let numel = inputs[i].numel();
        let step = match opts.max_coords {
            Some(m) if m > 0 && numel > m => numel.div_ceil(m),
            _ => 1,
        };
        for j in (0..numel).step_by(step) {
            let orig = inputs[i].data()[j];
            let mut eval_at = |delta: f64| -> Result<(f64, Vec<u64>)> {
                values[i].data_mut()[j] = orig + delta;
                let r = run(&values);
                values[i].data_mut()[j] = orig;
                r
            };
            let (fp, sp) = eval_at(opts.eps)?;
            let (fm, sm) = eval_at(-opts.eps)?;
            let mut crosses = sp != base_sig || sm != base_sig;
            if !crosses && opts.kink_radius > 1.0 {
                let r = opts.kink_radius * opts.eps;
                crosses = eval_at(r)?.1 != base_sig || eval_at(-r)?.1 != base_sig;
            }
            let a = analytic.data()[j];
            let numeric = (fp - fm) / (2.0 * opts.eps);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    input: i,
                    coord: j,
                    analytic: a,
                    numeric,
                });
            }
            if crosses {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// SGD-with-momentum state: one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(learning_rate: f64, weight_decay: f64, momentum: f64) -> Self {
        OptimState {
            learning_rate,
            weight_decay,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Restores velocity buffers (e.g. from a checkpoint).
    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) {
        self.velocity = velocity;
    }
}

/// `v ← μ·v + (g + λ·p)`, then `p ← p − η·v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() {
        return shape_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return shape_err(format!(
            "{} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return shape_err(format!(
                "parameter {}, gradient {}, velocity {}",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
    }
    let (lr, wd, mu) = (state.learning_rate, state.weight_decay, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
