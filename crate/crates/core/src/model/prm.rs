//! Per-coordinate gate blending the SGCT output with the initial pose.

use std::collections::BTreeMap;

use crate::graph::NodeId;
use crate::model::{Ctx, ModelConfig};

pub(super) fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let h = cfg.prm_hidden;
    let mut s = BTreeMap::new();
    s.insert("prm.l1.w".into(), vec![6, h]);
    s.insert("prm.l1.b".into(), vec![h]);
    s.insert("prm.l2.w".into(), vec![h, 3]);
    s.insert("prm.l2.b".into(), vec![3]);
    s
}

/// `δ = sigmoid(MLP([intermediate, ȳ]))`, shape `[B,N,3]`.
pub(super) fn gate(c: &mut Ctx<'_>, intermediate: NodeId, y_bar: NodeId) -> NodeId {
    let lead = c.tokens();
    let x = c.g.concat(&[intermediate, y_bar], 2);
    let h = c.linear(x, "prm.l1", &lead, c.cfg.prm_hidden);
    let h = c.g.gelu(h);
    let logits = c.linear(h, "prm.l2", &lead, 3);
    c.g.sigmoid(logits)
}

/// `ȳ + δ⊙(intermediate − ȳ)`, i.e. `δ⊙intermediate + (1−δ)⊙ȳ`.
pub(super) fn build(c: &mut Ctx<'_>, intermediate: NodeId, y_bar: NodeId) -> NodeId {
    let delta = gate(c, intermediate, y_bar);
    let diff = c.g.sub(intermediate, y_bar);
    let step = c.g.mul(delta, diff);
    c.g.add(y_bar, step)
}
