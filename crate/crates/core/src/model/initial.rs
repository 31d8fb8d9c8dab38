//! Graph-convolution lifter producing the initial 3D pose from 2D keypoints.

use std::collections::BTreeMap;

use crate::graph::NodeId;
use crate::model::{Ctx, ModelConfig};
use crate::skeleton::ROOT;
use crate::tensor::Tensor;

/// The lifter regresses meters whatever the model-space unit is, which keeps
/// its optimization independent of `pose_scale`.
const LIFTER_UNIT_MM: f64 = 1000.0;

pub(super) fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (n, c) = (cfg.num_joints, cfg.initial_channels);
    let mut s = BTreeMap::new();
    s.insert("init.in.w".into(), vec![2, c]);
    s.insert("init.in.b".into(), vec![c]);
    s.insert("init.pos".into(), vec![n, c]);
    for l in 0..cfg.initial_layers {
        s.insert(format!("init.layer{l}.w"), vec![c, c]);
        s.insert(format!("init.layer{l}.b"), vec![c]);
    }
    s.insert("init.out.w".into(), vec![c, 3]);
    s.insert("init.out.b".into(), vec![3]);
    s
}

/// Matrix `P` with `(P·y)_i = y_i − y_root`.
pub(super) fn reroot_matrix(n: usize) -> Tensor {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] += 1.0;
        p[i * n + ROOT] -= 1.0;
    }
    Tensor::from_parts(vec![n, n], p)
}

pub(super) fn build(c: &mut Ctx<'_>, x: NodeId) -> NodeId {
    let width = c.cfg.initial_channels;
    let lead = c.tokens();
    let h = c.linear(x, "init.in", &lead, width);
    let pos = c.g.param("init.pos");
    let pos = c.g.broadcast(pos, &[c.batch, c.n, width]);
    let mut h = c.g.add(h, pos);
    let adj = c.g.constant(c.adjacency.clone());
    for l in 0..c.cfg.initial_layers {
        let w = c.g.param(&format!("init.layer{l}.w"));
        let b = c.g.param(&format!("init.layer{l}.b"));
        let hw = c.g.matmul(h, w);
        let z = c.g.matmul(adj, hw);
        let z = c.add_bias(z, b, &lead, width);
        let z = c.g.layer_norm(z, 1e-5);
        let z = c.g.gelu(z);
        h = c.g.add(h, z);
    }
    let out = c.linear(h, "init.out", &lead, 3);
    let out = c.g.scale(out, LIFTER_UNIT_MM / c.pose_scale);
    let p = c.g.constant(reroot_matrix(c.n));
    c.g.matmul(p, out)
}
