//! Learnable components: the graph-convolution initial lifter, the
//! conditioned graph-convolution transformer (SGCT) and the refinement gate
//! (PRM), plus parameter storage and checkpoints.

pub mod checkpoint;
mod initial;
mod layers;
mod prm;
mod sgct;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, InputNormalization};
use crate::error::{Error, Result};
use crate::graph::{evaluate, Bindings, Graph, NodeId};
use crate::rng::RngStream;
use crate::skeleton::{Pose2D, Pose3D, SkeletonGraph};
use crate::tensor::Tensor;

pub use layers::{sinusoidal_features, Ctx};

/// Parameter-name prefixes of the two independently trained parts.
pub const INITIAL_PREFIX: &str = "init.";
pub const REFINE_PREFIXES: [&str; 2] = ["sgct.", "prm."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_joints: usize,
    /// SGCT channel width.
    pub channels: usize,
    /// Number of SGCT blocks.
    pub blocks: usize,
    pub heads: usize,
    /// Width of the timestep and conditioning embeddings.
    pub time_dim: usize,
    pub learnable_adjacency: bool,
    /// Residual graph-convolution layers in the initial lifter.
    pub initial_layers: usize,
    pub initial_channels: usize,
    /// Hidden width of the gate perceptron.
    pub prm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_joints: crate::skeleton::NUM_JOINTS,
            channels: 64,
            blocks: 3,
            heads: 4,
            time_dim: 64,
            learnable_adjacency: true,
            initial_layers: 4,
            initial_channels: 64,
            prm_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_joints", self.num_joints),
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("time_dim", self.time_dim),
            ("initial_layers", self.initial_layers),
            ("initial_channels", self.initial_channels),
            ("prm_hidden", self.prm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be at least 1")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_dim must be even"));
        }
        Ok(())
    }

    /// Name and shape of every parameter this configuration owns.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = initial::parameter_shapes(self);
        s.extend(sgct::parameter_shapes(self));
        s.extend(prm::parameter_shapes(self));
        s
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Random initialization. Weights are normal with std `1/sqrt(fan_in)`,
    /// biases zero; the conditioning projections and the SGCT output head
    /// start at zero so every block begins as an identity map.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (i, (name, shape)) in config.parameter_shapes().into_iter().enumerate() {
            let mut stream = RngStream::new(seed, crate::rng::mix(&[0x1417, i as u64]));
            let t = if zero_initialized(&name) || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name.ends_with("pos") {
                stream.gaussian(&shape).map(|v| 0.1 * v)
            } else {
                let fan_in = shape[0] as f64;
                stream.gaussian(&shape).map(|v| v / fan_in.sqrt())
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (k, v) in &self.tensors {
            bindings.bind(k.clone(), v);
        }
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ModelParams, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Checks that every expected tensor is present with the expected shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape) in config.parameter_shapes() {
            match self.tensors.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Checkpoint(format!("tensor `{name}` has non-finite entries")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn zero_initialized(name: &str) -> bool {
    name.contains(".ada.") || name.starts_with("sgct.final.") || name.ends_with(".adj")
}

/// The complete network with its input normalization.
#[derive(Clone, Debug)]
pub struct RefineModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub norm: InputNormalization,
    adjacency: Tensor,
}

impl RefineModel {
    pub fn new(config: ModelConfig, params: ModelParams, norm: InputNormalization, skeleton: &SkeletonGraph) -> Result<Self> {
        config.validate()?;
        if skeleton.num_joints() != config.num_joints {
            return Err(Error::invalid(format!(
                "skeleton has {} joints, model expects {}",
                skeleton.num_joints(),
                config.num_joints
            )));
        }
        params.validate(&config)?;
        Ok(Self { config, params, norm, adjacency: skeleton.normalized_adjacency() })
    }

    /// Replaces the graph-convolution support matrix (used to test joint
    /// permutation equivariance).
    pub fn with_adjacency(mut self, adjacency: Tensor) -> Self {
        self.adjacency = adjacency;
        self
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// Graph-building context for a batch of `batch` samples.
    pub fn ctx<'g>(&'g self, graph: &'g mut Graph, batch: usize) -> Ctx<'g> {
        Ctx {
            g: graph,
            batch,
            n: self.config.num_joints,
            cfg: &self.config,
            adjacency: &self.adjacency,
            pose_scale: self.norm.pose_scale,
        }
    }

    fn run(&self, build: impl FnOnce(&mut Ctx<'_>) -> Result<NodeId>, batch: usize, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let out = {
            let mut ctx = self.ctx(&mut graph, batch);
            build(&mut ctx)?
        };
        let mut b = Bindings::new();
        self.params.bind(&mut b);
        for (k, v) in inputs {
            b.bind(*k, v);
        }
        Ok(evaluate(&graph, &b)?.into_value(out))
    }

    /// Initial lifter on a normalized `[B,N,2]` batch; returns re-rooted
    /// model-space poses `[B,N,3]`.
    pub fn initial_forward(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(x, self.config.num_joints, 2)?;
        let batch = x.shape()[0];
        self.run(
            |c| {
                let x = c.g.input("x2d");
                Ok(initial::build(c, x))
            },
            batch,
            &[("x2d", x)],
        )
    }

    /// Deterministic initial 3D poses for pixel-space 2D inputs.
    pub fn initial_predict(&self, x: &[&Pose2D]) -> Result<Vec<Pose3D>> {
        if x.is_empty() {
            return Ok(vec![]);
        }
        let out = self.initial_forward(&self.norm.pose_2d(x))?;
        self.norm.unpose_3d(&out)
    }

    /// Timestep embedding (sinusoid followed by the two-layer perceptron).
    pub fn embed_timestep(&self, t: usize) -> Result<Tensor> {
        let feats = sinusoidal_features(&[t], self.config.time_dim);
        let out = self.run(
            |c| {
                let f = c.g.input("tsin");
                Ok(sgct::time_embedding(c, f))
            },
            1,
            &[("tsin", &feats)],
        )?;
        out.reshape(&[self.config.time_dim])
    }

    /// SGCT intermediate pose `[B,N,3]` in model space.
    pub fn sgct_forward(&self, y_bar: &Tensor, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let batch = self.check_refine_inputs(y_bar, y_t, x, t)?;
        let feats = sinusoidal_features(t, self.config.time_dim);
        self.run(
            |c| {
                let inputs = sgct::Inputs::declare(c.g);
                Ok(sgct::build(c, &inputs))
            },
            batch,
            &[("y_bar", y_bar), ("y_t", y_t), ("x2d", x), ("tsin", &feats)],
        )
    }

    /// Gate `δ⊙intermediate + (1−δ)⊙ȳ`.
    pub fn prm_forward(&self, intermediate: &Tensor, y_bar: &Tensor) -> Result<Tensor> {
        check_batch(y_bar, self.config.num_joints, 3)?;
        if intermediate.shape() != y_bar.shape() {
            return Err(Error::invalid("intermediate and initial pose shapes differ"));
        }
        self.run(
            |c| {
                let i = c.g.input("inter");
                let y = c.g.input("y_bar");
                Ok(prm::build(c, i, y))
            },
            y_bar.shape()[0],
            &[("inter", intermediate), ("y_bar", y_bar)],
        )
    }

    /// Gate values `δ ∈ (0,1)` for each joint coordinate.
    pub fn prm_gate(&self, intermediate: &Tensor, y_bar: &Tensor) -> Result<Tensor> {
        check_batch(y_bar, self.config.num_joints, 3)?;
        self.run(
            |c| {
                let i = c.g.input("inter");
                let y = c.g.input("y_bar");
                Ok(prm::gate(c, i, y))
            },
            y_bar.shape()[0],
            &[("inter", intermediate), ("y_bar", y_bar)],
        )
    }

    /// Full refinement network `PRM(SGCT([ȳ, yₜ], x, t), ȳ)`.
    pub fn refine(&self, y_bar: &Tensor, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let batch = self.check_refine_inputs(y_bar, y_t, x, t)?;
        let feats = sinusoidal_features(t, self.config.time_dim);
        self.run(
            |c| {
                let inputs = sgct::Inputs::declare(c.g);
                Ok(build_refine(c, &inputs))
            },
            batch,
            &[("y_bar", y_bar), ("y_t", y_t), ("x2d", x), ("tsin", &feats)],
        )
    }

    fn check_refine_inputs(&self, y_bar: &Tensor, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<usize> {
        let n = self.config.num_joints;
        check_batch(y_bar, n, 3)?;
        check_batch(y_t, n, 3)?;
        check_batch(x, n, 2)?;
        let batch = y_bar.shape()[0];
        if y_t.shape()[0] != batch || x.shape()[0] != batch || t.len() != batch {
            return Err(Error::invalid("refine inputs disagree on batch size"));
        }
        Ok(batch)
    }
}

impl Denoiser for RefineModel {
    fn normalization(&self) -> InputNormalization {
        self.norm
    }

    fn denoise(&self, y_bar: &Tensor, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.refine(y_bar, y_t, x, t)
    }
}

/// Graph nodes for the refinement network; shared by inference and training.
pub fn build_refine(c: &mut Ctx<'_>, inputs: &sgct::Inputs) -> NodeId {
    let inter = sgct::build(c, inputs);
    prm::build(c, inter, inputs.y_bar)
}

/// Graph nodes for the initial lifter on input `x` (`[B,N,2]`).
pub fn build_initial(c: &mut Ctx<'_>, x: NodeId) -> NodeId {
    initial::build(c, x)
}

pub use sgct::Inputs as RefineInputs;

fn check_batch(t: &Tensor, n: usize, d: usize) -> Result<()> {
    if t.rank() != 3 || t.shape()[1] != n || t.shape()[2] != d {
        return Err(Error::invalid(format!("expected [B,{n},{d}] tensor, got {:?}", t.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
