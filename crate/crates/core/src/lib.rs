//! Sparse-to-dense depth prediction.
//!
//! A convolutional encoder–decoder regresses a dense depth image from an RGB
//! image, a sparse set of depth samples, or both. The crate carries its own
//! reverse-mode autograd so every layer can be verified against finite
//! differences, plus the data pipeline, training loop and the geometry used
//! to turn predictions into point clouds.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod sampling;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{grad_check, sgd_step, GradCheck, Gradients, NodeId, OptimState, Precision, Tape};
pub use error::{Error, Result};
pub use losses::{LossKind, ValidMask};
pub use metrics::{compute_metrics, MetricsReport};
pub use model::{build_model, DecoderKind, FirstLayerKind, Model, ModelConfig};
pub use tensor::{Shape, Tensor};
