//! Source camera identification for videos.
//!
//! Frames are sampled at equal time intervals from a video, classified by a
//! convolutional network whose first layer is a bank of constrained
//! prediction-error filters, and the per-frame labels are combined into a
//! per-video verdict by majority vote.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and the forward/backward numeric kernels.
//! - [`constrained`]: the constrained filter bank and its projection.
//! - [`network`]: architecture description, model assembly and inference.
//! - [`trainer`]: SGD with momentum, checkpoints.
//! - [`frames`]: equally spaced frame sampling and extraction.
//! - [`dataset`]: device selection and leakage-free split manifests.
//! - [`evaluator`]: voting and evaluation reports.
//! - [`synthetic`]: a desk-scale dataset with known per-class noise patterns.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

pub mod constrained;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod frames;
pub mod gradcheck;
pub mod network;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
mod util;

pub use error::{Error, Result};
pub use util::short_hash;
pub use tensor::{Scalar, Tensor};
