//! Finite-difference verification of every differentiable layer and loss.
//!
//! Each case is checked at several random double-precision inputs; the
//! worst relative error over all of them is reported against the case's
//! tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check_with, GradCheckOptions, NodeId, Tape};
use crate::error::Result;
use crate::layers::{self, BnNodes, ConvNodes, Mode, ResidualNodes, ResidualStats, RunningStats, UpProjNodes};
use crate::losses::{self, LossKind, ValidMask};
use crate::model::{build_model, DecoderKind, FirstLayerKind, ModelConfig};
use crate::tensor::{Shape, Tensor};

/// Tolerance for single layers and losses.
pub const LAYER_TOL: f64 = 1e-4;
/// Tolerance for compositions deeper than a handful of operations.
pub const DEEP_TOL: f64 = 1e-3;
/// Central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Random input draws per case.
pub const DRAWS: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.checked > 0
    }
}

type Build = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

struct Case {
    name: &'static str,
    tolerance: f64,
    max_coords: Option<usize>,
    /// Produces inputs and the function for one random draw.
    make: Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)>,
}

fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces a tensor node to a scalar with fixed random weights so every
/// output coordinate carries a distinct gradient.
fn weighted_sum(t: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(Tensor::randn(t.shape(y), 1.0, &mut rng));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn conv(ids: &[NodeId], w: usize, b: Option<usize>, stride: usize, pad: usize) -> ConvNodes {
    ConvNodes {
        weight: ids[w],
        bias: b.map(|b| ids[b]),
        stride,
        pad,
    }
}

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    v.push(Case {
        name: "conv2d",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![randn([2, 3, 7, 6], rng), randn([4, 3, 3, 3], rng), randn([1, 4, 1, 1], rng)];
            (
                inputs,
                Box::new(|t, ids| {
                    let y = layers::conv2d(t, ids[0], &conv(ids, 1, Some(2), 2, 1))?;
                    weighted_sum(t, y, 1)
                }),
            )
        }),
    });
    v.push(Case {
        name: "depthwise_separable_conv",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![randn([2, 3, 6, 6], rng), randn([3, 1, 3, 3], rng), randn([5, 3, 1, 1], rng), randn([1, 5, 1, 1], rng)];
            (
                inputs,
                Box::new(|t, ids| {
                    let y = layers::depthwise_separable_conv(t, ids[0], ids[1], 2, 1, &conv(ids, 2, Some(3), 1, 0))?;
                    weighted_sum(t, y, 2)
                }),
            )
        }),
    });
    for (name, k) in [("transposed_conv2d_k2", 2usize), ("transposed_conv2d_k3", 3)] {
        v.push(Case {
            name,
            tolerance: LAYER_TOL,
            max_coords: None,
            make: Box::new(move |rng| {
                let inputs = vec![randn([2, 3, 4, 3], rng), randn([3, 2, k, k], rng), randn([1, 2, 1, 1], rng)];
                (
                    inputs,
                    Box::new(|t, ids| {
                        let y = layers::transposed_conv2d(t, ids[0], ids[1], Some(ids[2]))?;
                        weighted_sum(t, y, 3)
                    }),
                )
            }),
        });
    }
    v.push(Case {
        name: "unpool2x",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            (
                vec![randn([2, 2, 3, 4], rng)],
                Box::new(|t, ids| {
                    let y = layers::unpool2x(t, ids[0]);
                    weighted_sum(t, y, 4)
                }),
            )
        }),
    });
    v.push(Case {
        name: "up_conv",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![randn([1, 3, 3, 3], rng), randn([2, 3, 5, 5], rng), randn([1, 2, 1, 1], rng)];
            (
                inputs,
                Box::new(|t, ids| {
                    let y = layers::up_conv(t, ids[0], &conv(ids, 1, Some(2), 1, 2))?;
                    weighted_sum(t, y, 5)
                }),
            )
        }),
    });
    v.push(Case {
        name: "up_proj",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![
                randn([1, 3, 3, 3], rng),
                randn([2, 3, 5, 5], rng),
                randn([1, 2, 1, 1], rng),
                randn([2, 2, 3, 3], rng),
                randn([1, 2, 1, 1], rng),
                randn([2, 3, 5, 5], rng),
                randn([1, 2, 1, 1], rng),
            ];
            (
                inputs,
                Box::new(|t, ids| {
                    let p = UpProjNodes {
                        conv1: conv(ids, 1, Some(2), 1, 2),
                        conv2: conv(ids, 3, Some(4), 1, 1),
                        skip: conv(ids, 5, Some(6), 1, 2),
                    };
                    let y = layers::up_proj(t, ids[0], &p)?;
                    weighted_sum(t, y, 6)
                }),
            )
        }),
    });
    v.push(Case {
        name: "bilinear_upsample",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            (
                vec![randn([2, 2, 3, 4], rng)],
                Box::new(|t, ids| {
                    let y = layers::bilinear_upsample(t, ids[0], 7, 9)?;
                    weighted_sum(t, y, 7)
                }),
            )
        }),
    });
    v.push(Case {
        name: "batch_norm",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![randn([3, 2, 3, 3], rng), randn([1, 2, 1, 1], rng), randn([1, 2, 1, 1], rng)];
            (
                inputs,
                Box::new(|t, ids| {
                    let mut stats = RunningStats::new(2);
                    let p = BnNodes {
                        gamma: ids[1],
                        beta: ids[2],
                    };
                    let y = layers::batch_norm(t, ids[0], &p, &mut stats, Mode::Train)?;
                    weighted_sum(t, y, 8)
                }),
            )
        }),
    });
    v.push(Case {
        name: "batch_norm_eval",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![randn([2, 2, 3, 3], rng), randn([1, 2, 1, 1], rng), randn([1, 2, 1, 1], rng)];
            (
                inputs,
                Box::new(|t, ids| {
                    let mut stats = RunningStats {
                        mean: vec![0.3, -0.2],
                        var: vec![1.7, 0.6],
                    };
                    let p = BnNodes {
                        gamma: ids[1],
                        beta: ids[2],
                    };
                    let y = layers::batch_norm(t, ids[0], &p, &mut stats, Mode::Eval)?;
                    weighted_sum(t, y, 9)
                }),
            )
        }),
    });
    v.push(Case {
        name: "residual_block",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            let inputs = vec![
                randn([2, 2, 6, 6], rng),
                randn([3, 2, 3, 3], rng),
                Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, rng),
                randn([1, 3, 1, 1], rng),
                randn([3, 3, 3, 3], rng),
                Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, rng),
                randn([1, 3, 1, 1], rng),
                randn([3, 2, 1, 1], rng),
                Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, rng),
                randn([1, 3, 1, 1], rng),
            ];
            (
                inputs,
                Box::new(|t, ids| {
                    let p = ResidualNodes {
                        conv1: conv(ids, 1, None, 2, 1),
                        bn1: BnNodes {
                            gamma: ids[2],
                            beta: ids[3],
                        },
                        conv2: conv(ids, 4, None, 1, 1),
                        bn2: BnNodes {
                            gamma: ids[5],
                            beta: ids[6],
                        },
                        skip: Some((
                            conv(ids, 7, None, 2, 0),
                            BnNodes {
                                gamma: ids[8],
                                beta: ids[9],
                            },
                        )),
                    };
                    let (mut a, mut b, mut c) = (RunningStats::new(3), RunningStats::new(3), RunningStats::new(3));
                    let stats = ResidualStats {
                        bn1: &mut a,
                        bn2: &mut b,
                        skip: Some(&mut c),
                    };
                    let y = layers::residual_block(t, ids[0], &p, stats, Mode::Train)?;
                    weighted_sum(t, y, 10)
                }),
            )
        }),
    });
    v.push(Case {
        name: "channel_dropout",
        tolerance: LAYER_TOL,
        max_coords: None,
        make: Box::new(|rng| {
            (
                vec![randn([2, 4, 3, 3], rng)],
                Box::new(|t, ids| {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(11);
                    let y = layers::channel_dropout(t, ids[0], 0.5, Mode::Train, &mut drop_rng)?;
                    weighted_sum(t, y, 11)
                }),
            )
        }),
    });
    for (name, kind) in [("loss_l1", LossKind::L1), ("loss_l2", LossKind::L2), ("loss_berhu", LossKind::Berhu)] {
        v.push(Case {
            name,
            tolerance: LAYER_TOL,
            max_coords: None,
            make: Box::new(move |rng| {
                let shape = Shape::new(2, 1, 4, 5);
                let gt = Tensor::uniform(shape, 0.5, 5.0, rng);
                let mut valid: Vec<bool> = (0..shape.numel()).map(|i| i % 7 != 3).collect();
                valid[0] = true;
                let mask = ValidMask::new(shape, valid).expect("sized");
                (
                    vec![Tensor::uniform(shape, 0.0, 6.0, rng)],
                    Box::new(move |t, ids| losses::loss(t, kind, ids[0], &gt, &mask)),
                )
            }),
        });
    }
    for (name, kind) in [("model_end_to_end_berhu", LossKind::Berhu), ("model_end_to_end_l1", LossKind::L1)] {
        v.push(Case {
            name,
            tolerance: DEEP_TOL,
            max_coords: Some(48),
            make: Box::new(move |rng| end_to_end(kind, rng)),
        });
    }
    v
}

/// Mini model (1×4×16×16 input, Train-mode batch norm) followed by a loss;
/// inputs are the image followed by every parameter.
fn end_to_end(kind: LossKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
    let cfg = ModelConfig {
        first_layer: FirstLayerKind::Conv,
        input_channels: 4,
        encoder_widths: vec![4, 8],
        encoder_block_count: 1,
        decoder_kind: DecoderKind::UpProj,
        decoder_stages: 2,
        output_size: (16, 16),
        chan_drop_p: 0.5,
    };
    let model = build_model(&cfg, rand::Rng::gen(rng)).expect("valid mini config");
    let shape = Shape::new(1, 1, 16, 16);
    let gt = Tensor::uniform(shape, 0.5, 3.0, rng);
    let mask = ValidMask::full(shape);
    let mut inputs = vec![randn([1, 4, 16, 16], rng)];
    inputs.extend(model.param_values());
    let build = move |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let mut m = model.clone();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward_bound(t, ids[0], &ids[1..], &mut r)?;
        losses::loss(t, kind, out, &gt, &mask)
    };
    (inputs, Box::new(build))
}

/// Names of all cases, in execution order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case at [`DRAWS`] random inputs.
pub fn run_suite(seed: u64, eps: f64) -> Result<Vec<CaseResult>> {
    cases().into_iter().map(|case| run_case(&case, seed, eps)).collect()
}

/// Runs the single named case.
pub fn run_named(name: &str, seed: u64, eps: f64) -> Result<Option<CaseResult>> {
    cases()
        .into_iter()
        .find(|c| c.name == name)
        .map(|c| run_case(&c, seed, eps))
        .transpose()
}

fn run_case(case: &Case, seed: u64, eps: f64) -> Result<CaseResult> {
    let mut result = CaseResult {
        name: case.name.to_string(),
        max_rel_err: 0.0,
        tolerance: case.tolerance,
        checked: 0,
        skipped: 0,
    };
    let opts = GradCheckOptions {
        eps,
        max_coords: case.max_coords,
        ..GradCheckOptions::default()
    };
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(draw));
        let (inputs, f) = (case.make)(&mut rng);
        let r = grad_check_with(|t, ids| f(t, ids), &inputs, &opts)?;
        result.max_rel_err = result.max_rel_err.max(r.max_rel_err);
        result.checked += r.checked;
        result.skipped += r.skipped;
    }
    Ok(result)
}
