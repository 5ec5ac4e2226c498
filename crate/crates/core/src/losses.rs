//! Masked regression losses: L2, L1 and berHu.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fraction of the largest absolute error used as the berHu threshold.
pub const BERHU_THRESHOLD_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
    Berhu,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "berhu" => Ok(LossKind::Berhu),
            other => Err(Error::Parse(format!("unknown loss '{other}' (expected l1, l2, berhu)"))),
        }
    }
}

/// Pixels where ground truth exists (depth > 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    shape: Shape,
    valid: Vec<bool>,
}

impl ValidMask {
    pub fn new(shape: Shape, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != shape.numel() {
            return shape_err(format!("mask of {} entries for shape {shape}", valid.len()));
        }
        Ok(ValidMask { shape, valid })
    }

    /// Marks every pixel with strictly positive depth.
    pub fn from_depth(depth: &Tensor) -> Self {
        ValidMask {
            shape: depth.shape(),
            valid: depth.data().iter().map(|&d| d > 0.0).collect(),
        }
    }

    pub fn full(shape: Shape) -> Self {
        ValidMask {
            shape,
            valid: vec![true; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Loss value, its gradient w.r.t. the prediction, and per-pixel branch codes.
#[derive(Clone, Debug)]
pub(crate) struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub branches: Vec<u8>,
}

/// berHu threshold `c = 0.2 · max |pred − gt|` over masked pixels, with the
/// index of the (first) pixel attaining the maximum.
pub fn berhu_threshold(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, ((p, g), &m)) in pred.iter().zip(gt).zip(mask).enumerate() {
        if !m {
            continue;
        }
        let e = (p - g).abs();
        if best.map_or(true, |(b, _)| e > b) {
            best = Some((e, i));
        }
    }
    let (max, idx) = best.ok_or(Error::EmptyMask)?;
    Ok((BERHU_THRESHOLD_FRACTION * max, idx))
}

/// Reverse Huber penalty of a single residual for threshold `c > 0`.
pub fn berhu(e: f64, c: f64) -> f64 {
    if e.abs() <= c {
        e.abs()
    } else {
        (e * e + c * c) / (2.0 * c)
    }
}

fn sign(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_code(e: f64) -> u8 {
    (sign(e) + 1.0) as u8
}

pub(crate) fn evaluate(kind: LossKind, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<LossEval> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut branches = vec![0u8; pred.len()];
    let mut total = 0.0;
    match kind {
        LossKind::L2 => {
            for i in 0..pred.len() {
                if mask[i] {
                    let e = pred[i] - gt[i];
                    total += e * e;
                    grad[i] = 2.0 * e * inv_n;
                }
            }
        }
        LossKind::L1 => {
            for i in 0..pred.len() {
                if mask[i] {
                    let e = pred[i] - gt[i];
                    total += e.abs();
                    grad[i] = sign(e) * inv_n;
                    branches[i] = sign_code(e);
                }
            }
        }
        LossKind::Berhu => {
            let (c, argmax) = berhu_threshold(pred, gt, mask)?;
            if c == 0.0 {
                return Ok(LossEval {
                    value: 0.0,
                    grad,
                    branches,
                });
            }
            // dL/dc, routed to the pixel that defines c.
            let mut dc = 0.0;
            for i in 0..pred.len() {
                if !mask[i] {
                    continue;
                }
                let e = pred[i] - gt[i];
                total += berhu(e, c);
                if e.abs() <= c {
                    grad[i] = sign(e) * inv_n;
                    branches[i] = sign_code(e);
                } else {
                    grad[i] = e / c * inv_n;
                    dc += (0.5 - e * e / (2.0 * c * c)) * inv_n;
                    branches[i] = 3 + sign_code(e);
                }
            }
            let e_max = pred[argmax] - gt[argmax];
            grad[argmax] += dc * BERHU_THRESHOLD_FRACTION * sign(e_max);
            // The argmax identity is itself a branch of the max.
            branches.extend_from_slice(&(argmax as u64).to_le_bytes());
        }
    }
    Ok(LossEval {
        value: total * inv_n,
        grad,
        branches,
    })
}

fn check(tape: &Tape, pred: NodeId, gt: &Tensor, mask: &ValidMask) -> Result<()> {
    let ps = tape.shape(pred);
    if ps != gt.shape() || ps != mask.shape() {
        return shape_err(format!(
            "prediction {ps}, ground truth {}, mask {}",
            gt.shape(),
            mask.shape()
        ));
    }
    Ok(())
}

/// Mean squared error over valid pixels.
pub fn loss_l2(tape: &mut Tape, pred: NodeId, gt: &Tensor, mask: &ValidMask) -> Result<NodeId> {
    check(tape, pred, gt, mask)?;
    tape.masked_loss(pred, gt, mask.as_slice(), LossKind::L2)
}

/// Mean absolute error over valid pixels; subgradient 0 at zero error.
pub fn loss_l1(tape: &mut Tape, pred: NodeId, gt: &Tensor, mask: &ValidMask) -> Result<NodeId> {
    check(tape, pred, gt, mask)?;
    tape.masked_loss(pred, gt, mask.as_slice(), LossKind::L1)
}

/// Mean reverse-Huber penalty with the batch-dependent threshold
/// `c = 0.2 · max |e|`. Zero when the prediction is exact.
pub fn loss_berhu(tape: &mut Tape, pred: NodeId, gt: &Tensor, mask: &ValidMask) -> Result<NodeId> {
    check(tape, pred, gt, mask)?;
    tape.masked_loss(pred, gt, mask.as_slice(), LossKind::Berhu)
}

pub fn loss(tape: &mut Tape, kind: LossKind, pred: NodeId, gt: &Tensor, mask: &ValidMask) -> Result<NodeId> {
    check(tape, pred, gt, mask)?;
    tape.masked_loss(pred, gt, mask.as_slice(), kind)
}
