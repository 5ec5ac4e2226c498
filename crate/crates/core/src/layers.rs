//! Network building blocks expressed as operations on a [`Tape`].
//!
//! Parameters are passed as tape nodes so the same functions serve training,
//! inference and gradient checking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{invalid, shape_err, Result};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch when updating running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// A convolution whose weight (and optional bias) live on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvNodes {
    /// `(out_c, in_c, kh, kw)`
    pub weight: NodeId,
    /// `(1, out_c, 1, 1)`
    pub bias: Option<NodeId>,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv2d(tape: &mut Tape, x: NodeId, p: &ConvNodes) -> Result<NodeId> {
    tape.conv2d(x, p.weight, p.bias, p.stride, p.pad)
}

/// Per-channel spatial convolution followed by a 1×1 cross-channel convolution.
///
/// `spatial` is `(in_c, 1, k, k)`; `pointwise` must be a 1×1 stride-1 convolution.
pub fn depthwise_separable_conv(
    tape: &mut Tape,
    x: NodeId,
    spatial: NodeId,
    stride: usize,
    pad: usize,
    pointwise: &ConvNodes,
) -> Result<NodeId> {
    let ps = tape.shape(pointwise.weight);
    let xs = tape.shape(x);
    if ps.h != 1 || ps.w != 1 || pointwise.stride != 1 || pointwise.pad != 0 {
        return shape_err(format!("pointwise weights {ps} must be a 1x1 stride-1 convolution"));
    }
    if tape.shape(spatial).n != xs.c || ps.c != xs.c {
        return shape_err(format!(
            "depthwise separable conv with {} spatial kernels and {} pointwise inputs for input {xs}",
            tape.shape(spatial).n,
            ps.c
        ));
    }
    let s = tape.depthwise_conv2d(x, spatial, stride, pad)?;
    conv2d(tape, s, pointwise)
}

/// Keeps each channel verbatim with probability `p` and zeroes it otherwise.
/// No rescaling; identity in [`Mode::Eval`].
pub fn channel_dropout<R: Rng + ?Sized>(tape: &mut Tape, x: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("channel dropout probability {p} outside (0, 1]"));
    }
    if mode == Mode::Eval || p == 1.0 {
        return Ok(x);
    }
    let s = tape.shape(x);
    let keep = (0..s.n * s.c).map(|_| rng.gen::<f64>() < p).collect();
    tape.channel_mask(x, keep)
}

/// Stride-2 transposed convolution with a 2×2 or 3×3 kernel.
///
/// Both kernel sizes return exactly `2H×2W`: the 3×3 variant's extra
/// bottom row and right column are cropped. `weight` is `(in_c, out_c, k, k)`.
pub fn transposed_conv2d(tape: &mut Tape, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    let ws = tape.shape(weight);
    if ws.h != ws.w || !(ws.h == 2 || ws.h == 3) {
        return invalid(format!("transposed conv kernel must be 2x2 or 3x3, got {}x{}", ws.h, ws.w));
    }
    let xs = tape.shape(x);
    let y = tape.conv_transpose2d(x, weight, bias, 2)?;
    if ws.h == 3 {
        tape.crop(y, 2 * xs.h, 2 * xs.w)
    } else {
        Ok(y)
    }
}

pub fn unpool2x(tape: &mut Tape, x: NodeId) -> NodeId {
    tape.unpool2x(x)
}

/// Unpool, 5×5 convolution, ReLU.
pub fn up_conv(tape: &mut Tape, x: NodeId, conv: &ConvNodes) -> Result<NodeId> {
    check_up_kernel(tape, conv, 5)?;
    let u = tape.unpool2x(x);
    let c = conv2d(tape, u, conv)?;
    Ok(tape.relu(c))
}

/// Parameters of an up-projection block.
#[derive(Clone, Copy, Debug)]
pub struct UpProjNodes {
    /// 5×5, main branch.
    pub conv1: ConvNodes,
    /// 3×3, main branch.
    pub conv2: ConvNodes,
    /// 5×5, projection branch.
    pub skip: ConvNodes,
}

/// Unpool, then `ReLU(conv3(ReLU(conv5(u))) + conv5'(u))`.
pub fn up_proj(tape: &mut Tape, x: NodeId, p: &UpProjNodes) -> Result<NodeId> {
    check_up_kernel(tape, &p.conv1, 5)?;
    check_up_kernel(tape, &p.conv2, 3)?;
    check_up_kernel(tape, &p.skip, 5)?;
    let u = tape.unpool2x(x);
    let a = conv2d(tape, u, &p.conv1)?;
    let a = tape.relu(a);
    let a = conv2d(tape, a, &p.conv2)?;
    let b = conv2d(tape, u, &p.skip)?;
    let s = tape.add(a, b)?;
    Ok(tape.relu(s))
}

fn check_up_kernel(tape: &Tape, conv: &ConvNodes, k: usize) -> Result<()> {
    let ws = tape.shape(conv.weight);
    if ws.h != k || ws.w != k || conv.stride != 1 || conv.pad != k / 2 {
        return shape_err(format!(
            "expected a size-preserving {k}x{k} convolution, got weights {ws} stride {} pad {}",
            conv.stride, conv.pad
        ));
    }
    Ok(())
}

pub fn bilinear_upsample(tape: &mut Tape, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
    tape.bilinear_upsample(x, out_h, out_w)
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// folds them into `stats` (unbiased variance); Eval mode uses `stats`.
pub fn batch_norm(tape: &mut Tape, x: NodeId, p: &BnNodes, stats: &mut RunningStats, mode: Mode) -> Result<NodeId> {
    match mode {
        Mode::Eval => tape.batch_norm_eval(x, p.gamma, p.beta, &stats.mean, &stats.var, BN_EPS),
        Mode::Train => {
            let (y, batch) = tape.batch_norm_train(x, p.gamma, p.beta, BN_EPS)?;
            let unbias = batch.count as f64 / (batch.count - 1) as f64;
            for c in 0..batch.mean.len() {
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * batch.mean[c];
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
            }
            Ok(y)
        }
    }
}

/// Parameters of a basic residual block.
#[derive(Clone, Copy, Debug)]
pub struct ResidualNodes {
    pub conv1: ConvNodes,
    pub bn1: BnNodes,
    pub conv2: ConvNodes,
    pub bn2: BnNodes,
    /// 1×1 projection used when stride or channel count changes.
    pub skip: Option<(ConvNodes, BnNodes)>,
}

/// Running statistics for the (up to three) batch norms of a residual block.
#[derive(Debug)]
pub struct ResidualStats<'a> {
    pub bn1: &'a mut RunningStats,
    pub bn2: &'a mut RunningStats,
    pub skip: Option<&'a mut RunningStats>,
}

/// `ReLU(bn2(conv2(ReLU(bn1(conv1(x))))) + skip(x))`. The stride of
/// `conv1` (and the projection) sets the downsampling.
pub fn residual_block(
    tape: &mut Tape,
    x: NodeId,
    p: &ResidualNodes,
    stats: ResidualStats<'_>,
    mode: Mode,
) -> Result<NodeId> {
    let h = conv2d(tape, x, &p.conv1)?;
    let h = batch_norm(tape, h, &p.bn1, stats.bn1, mode)?;
    let h = tape.relu(h);
    let h = conv2d(tape, h, &p.conv2)?;
    let h = batch_norm(tape, h, &p.bn2, stats.bn2, mode)?;
    let shortcut = match (&p.skip, stats.skip) {
        (Some((conv, bn)), Some(s)) => {
            let s2 = conv2d(tape, x, conv)?;
            batch_norm(tape, s2, bn, s, mode)?
        }
        (None, None) => x,
        _ => return invalid("residual block projection and its statistics must both be present"),
    };
    if tape.shape(shortcut) != tape.shape(h) {
        return shape_err(format!(
            "residual branch {} does not match shortcut {}",
            tape.shape(h),
            tape.shape(shortcut)
        ));
    }
    let s = tape.add(h, shortcut)?;
    Ok(tape.relu(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(tape: &mut Tape, w: Tensor, b: Option<Tensor>, stride: usize, pad: usize) -> ConvNodes {
        let weight = tape.constant(w);
        let bias = b.map(|b| tape.constant(b));
        ConvNodes {
            weight,
            bias,
            stride,
            pad,
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::randn([2, 1, 5, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let p = conv(&mut tape, Tensor::ones([1, 1, 1, 1]), Some(Tensor::zeros([1, 1, 1, 1])), 1, 0);
        let y = conv2d(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn sum_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let p = conv(&mut tape, Tensor::ones([1, 1, 3, 3]), None, 1, 0);
        let y = conv2d(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2, 3, 3]));
        let p = conv(&mut tape, Tensor::ones([1, 3, 3, 3]), None, 1, 0);
        assert!(conv2d(&mut tape, x, &p).is_err());
    }

    #[test]
    fn depthwise_double_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = Tensor::randn([1, 3, 6, 6], 1.0, &mut rng);
        let mut delta = Tensor::zeros([3, 1, 3, 3]);
        for c in 0..3 {
            delta.set(c, 0, 1, 1, 1.0);
        }
        let mut eye = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            eye.set(c, c, 0, 0, 1.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let s = tape.constant(delta);
        let pw = conv(&mut tape, eye, None, 1, 0);
        let y = depthwise_separable_conv(&mut tape, x, s, 1, 1, &pw).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn channel_dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 4, 2, 2]));
        assert_eq!(channel_dropout(&mut tape, x, 0.3, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(channel_dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(channel_dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).is_err());
        assert!(channel_dropout(&mut tape, x, 1.5, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn transposed_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 3.0));
        let w = tape.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = transposed_conv2d(&mut tape, x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn transposed_sizes_and_kernel_check() {
        for k in [2, 3] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::ones([1, 2, 7, 7]));
            let w = tape.constant(Tensor::ones([2, 3, k, k]));
            let y = transposed_conv2d(&mut tape, x, w, None).unwrap();
            assert_eq!(tape.shape(y), Shape::new(1, 3, 14, 14));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2, 7, 7]));
        let w = tape.constant(Tensor::ones([2, 3, 4, 4]));
        assert!(transposed_conv2d(&mut tape, x, w, None).is_err());
    }

    #[test]
    fn unpool_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 5.0));
        let y = unpool2x(&mut tape, x);
        assert_eq!(tape.value(y).data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_constant_and_too_small() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 3, 4], 3.7));
        let y = bilinear_upsample(&mut tape, x, 7, 9).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 3.7).abs() < 1e-15));
        assert!(bilinear_upsample(&mut tape, x, 2, 9).is_err());
    }

    #[test]
    fn up_conv_zero_and_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 8, 4, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = conv(&mut tape, Tensor::randn([3, 8, 5, 5], 1.0, &mut rng), Some(Tensor::zeros([1, 3, 1, 1])), 1, 2);
        let y = up_conv(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 3, 8, 8));
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn up_proj_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn([1, 4, 3, 3], 1.0, &mut rng));
        let zb = || Some(Tensor::zeros([1, 2, 1, 1]));
        let p = UpProjNodes {
            conv1: conv(&mut tape, Tensor::zeros([2, 4, 5, 5]), zb(), 1, 2),
            conv2: conv(&mut tape, Tensor::zeros([2, 2, 3, 3]), zb(), 1, 1),
            skip: conv(&mut tape, Tensor::zeros([2, 4, 5, 5]), zb(), 1, 2),
        };
        let y = up_proj(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 2, 6, 6));
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_normalizes_and_eval_plugs_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = Tensor::randn([3, 2, 4, 5], 5.0, &mut rng).map(|v| v + 1.5);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let p = BnNodes {
            gamma: tape.constant(Tensor::ones([1, 2, 1, 1])),
            beta: tape.constant(Tensor::zeros([1, 2, 1, 1])),
        };
        let mut stats = RunningStats::new(2);
        let y = batch_norm(&mut tape, x, &p, &mut stats, Mode::Train).unwrap();
        let yv = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| yv.plane(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-6, "variance {v}");
        }
        assert!(stats.mean.iter().all(|m| *m != 0.0));

        let mut fresh = RunningStats::new(2);
        let e = batch_norm(&mut tape, x, &p, &mut fresh, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in tape.value(e).data().iter().zip(xv.data()) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_single_element_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2, 1, 1]));
        let p = BnNodes {
            gamma: tape.constant(Tensor::ones([1, 2, 1, 1])),
            beta: tape.constant(Tensor::zeros([1, 2, 1, 1])),
        };
        let mut stats = RunningStats::new(2);
        assert!(batch_norm(&mut tape, x, &p, &mut stats, Mode::Train).is_err());
        assert!(batch_norm(&mut tape, x, &p, &mut stats, Mode::Eval).is_ok());
    }
}
