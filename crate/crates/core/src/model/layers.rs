use crate::graph::{Graph, NodeId};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Graph-building context: the graph plus the static sizes a forward pass needs.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub batch: usize,
    pub n: usize,
    pub cfg: &'a ModelConfig,
    /// Normalized skeleton adjacency `[N,N]`.
    pub adjacency: &'a Tensor,
    /// Millimeters per model-space unit.
    pub pose_scale: f64,
}

impl Ctx<'_> {
    /// `x @ {prefix}.w + {prefix}.b`, with the bias broadcast over `lead`.
    pub fn linear(&mut self, x: NodeId, prefix: &str, lead: &[usize], out: usize) -> NodeId {
        let w = self.g.param(&format!("{prefix}.w"));
        let b = self.g.param(&format!("{prefix}.b"));
        let y = self.g.matmul(x, w);
        self.add_bias(y, b, lead, out)
    }

    pub fn add_bias(&mut self, y: NodeId, b: NodeId, lead: &[usize], out: usize) -> NodeId {
        let mut shape = lead.to_vec();
        shape.push(out);
        let bb = self.g.broadcast(b, &shape);
        self.g.add(y, bb)
    }

    pub fn tokens(&self) -> [usize; 2] {
        [self.batch, self.n]
    }
}

/// `[B, dim]` sinusoidal features: `sin(t·ω_k)` then `cos(t·ω_k)` with
/// geometric frequencies `ω_k = 10000^(−k/half)`.
pub fn sinusoidal_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|w| t as f64 * w).collect();
        data.extend(angles.iter().map(|a| a.sin()));
        data.extend(angles.iter().map(|a| a.cos()));
    }
    Tensor::from_parts(vec![ts.len(), dim], data)
}
