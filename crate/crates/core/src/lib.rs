//! Diffusion-based refinement for 2D-to-3D human pose lifting.
//!
//! A deterministic lifter produces an initial 3D pose from 2D keypoints; a
//! conditioned denoiser then refines it starting from Gaussian noise. Running
//! the denoiser with several noise draws yields multiple hypotheses that can be
//! averaged or aggregated joint-wise by reprojection.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod hypotheses;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Bindings, Graph, NodeId};
pub use rng::RngStream;
pub use tensor::Tensor;
