//! Graph-convolution transformer over joint tokens, modulated by the timestep
//! and 2D-pose conditioning.
//!
//! Each block runs three pre-normalized sub-layers (graph convolution,
//! multi-head self-attention, feed-forward). Before each one the normalized
//! tokens are scaled and shifted by vectors projected from the conditioning,
//! and the sub-layer output is gated before the residual add. The projections
//! start at zero, so a fresh block is the identity.

use std::collections::BTreeMap;

use crate::graph::{Graph, NodeId};
use crate::model::{Ctx, ModelConfig};

const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 2;

pub(super) fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (n, c, d) = (cfg.num_joints, cfg.channels, cfg.time_dim);
    let mut s = BTreeMap::new();
    let mut lin = |name: &str, i: usize, o: usize| {
        s.insert(format!("{name}.w"), vec![i, o]);
        s.insert(format!("{name}.b"), vec![o]);
    };
    lin("sgct.in", 6, c);
    lin("sgct.x2d", 2, c);
    lin("sgct.cond2d", n * 2, d);
    lin("sgct.time.l1", d, d);
    lin("sgct.time.l2", d, d);
    for k in 0..cfg.blocks {
        let p = format!("sgct.block{k}");
        lin(&format!("{p}.ada"), d, 9 * c);
        lin(&format!("{p}.gcn"), c, c);
        lin(&format!("{p}.attn.qkv"), c, 3 * c);
        lin(&format!("{p}.attn.out"), c, c);
        lin(&format!("{p}.ffn.l1"), c, FFN_MULT * c);
        lin(&format!("{p}.ffn.l2"), FFN_MULT * c, c);
    }
    lin("sgct.final.ada", d, 2 * c);
    lin("sgct.final", c, 3);
    s.insert("sgct.pos".into(), vec![n, c]);
    if cfg.learnable_adjacency {
        for k in 0..cfg.blocks {
            s.insert(format!("sgct.block{k}.gcn.adj"), vec![n, n]);
        }
    }
    s
}

type Sublayer = fn(&mut Ctx<'_>, NodeId, &str) -> NodeId;

/// Graph inputs of the refinement network.
#[derive(Clone, Copy, Debug)]
pub struct Inputs {
    /// Initial pose `[B,N,3]`.
    pub y_bar: NodeId,
    /// Noisy pose `[B,N,3]`.
    pub y_t: NodeId,
    /// Normalized 2D pose `[B,N,2]`.
    pub x2d: NodeId,
    /// Sinusoidal timestep features `[B,D]`.
    pub tsin: NodeId,
}

impl Inputs {
    pub fn declare(g: &mut Graph) -> Self {
        Self { y_bar: g.input("y_bar"), y_t: g.input("y_t"), x2d: g.input("x2d"), tsin: g.input("tsin") }
    }
}

/// Two-layer perceptron over sinusoidal features, `[B,D] -> [B,D]`.
pub(super) fn time_embedding(c: &mut Ctx<'_>, tsin: NodeId) -> NodeId {
    let d = c.cfg.time_dim;
    let lead = [c.batch];
    let h = c.linear(tsin, "sgct.time.l1", &lead, d);
    let h = c.g.gelu(h);
    c.linear(h, "sgct.time.l2", &lead, d)
}

/// Global conditioning vector `[B,D]` from timestep and the whole 2D pose.
fn conditioning(c: &mut Ctx<'_>, inputs: &Inputs) -> NodeId {
    let d = c.cfg.time_dim;
    let temb = time_embedding(c, inputs.tsin);
    let flat = c.g.reshape(inputs.x2d, &[c.batch, c.n * 2]);
    let pose = c.linear(flat, "sgct.cond2d", &[c.batch], d);
    let sum = c.g.add(temb, pose);
    c.g.gelu(sum)
}

/// Splits `[B, k·C]` modulation output into `k` tensors broadcast to `[B,N,C]`.
fn split_mods(c: &mut Ctx<'_>, mods: NodeId, k: usize) -> Vec<NodeId> {
    let ch = c.cfg.channels;
    (0..k)
        .map(|j| {
            let s = c.g.slice(mods, 1, j * ch, (j + 1) * ch);
            let s = c.g.reshape(s, &[c.batch, 1, ch]);
            c.g.broadcast(s, &[c.batch, c.n, ch])
        })
        .collect()
}

/// `LN(h)·(1 + scale) + shift`.
fn modulate(c: &mut Ctx<'_>, h: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
    let n = c.g.layer_norm(h, LN_EPS);
    let scaled = c.g.mul(n, scale);
    let n = c.g.add(n, scaled);
    c.g.add(n, shift)
}

fn graph_conv(c: &mut Ctx<'_>, h: NodeId, prefix: &str) -> NodeId {
    let ch = c.cfg.channels;
    let mut adj = c.g.constant(c.adjacency.clone());
    if c.cfg.learnable_adjacency {
        let learned = c.g.param(&format!("{prefix}.adj"));
        adj = c.g.add(adj, learned);
    }
    let w = c.g.param(&format!("{prefix}.w"));
    let b = c.g.param(&format!("{prefix}.b"));
    let hw = c.g.matmul(h, w);
    let z = c.g.matmul(adj, hw);
    let lead = c.tokens();
    let z = c.add_bias(z, b, &lead, ch);
    c.g.gelu(z)
}

fn attention(c: &mut Ctx<'_>, h: NodeId, prefix: &str) -> NodeId {
    let (b, n, ch, heads) = (c.batch, c.n, c.cfg.channels, c.cfg.heads);
    let dh = ch / heads;
    let lead = c.tokens();
    let qkv = c.linear(h, &format!("{prefix}.qkv"), &lead, 3 * ch);
    let mut split = |j: usize| {
        let s = c.g.slice(qkv, 2, j * ch, (j + 1) * ch);
        let s = c.g.reshape(s, &[b, n, heads, dh]);
        c.g.transpose(s, 1, 2)
    };
    let (q, k, v) = (split(0), split(1), split(2));
    let kt = c.g.transpose(k, 2, 3);
    let scores = c.g.matmul(q, kt);
    let scores = c.g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = c.g.softmax(scores);
    let o = c.g.matmul(attn, v);
    let o = c.g.transpose(o, 1, 2);
    let o = c.g.reshape(o, &[b, n, ch]);
    c.linear(o, &format!("{prefix}.out"), &lead, ch)
}

fn feed_forward(c: &mut Ctx<'_>, h: NodeId, prefix: &str) -> NodeId {
    let ch = c.cfg.channels;
    let lead = c.tokens();
    let z = c.linear(h, &format!("{prefix}.l1"), &lead, FFN_MULT * ch);
    let z = c.g.gelu(z);
    c.linear(z, &format!("{prefix}.l2"), &lead, ch)
}

/// Intermediate pose `[B,N,3]`: `ȳ` plus a learned correction.
pub(super) fn build(c: &mut Ctx<'_>, inputs: &Inputs) -> NodeId {
    let ch = c.cfg.channels;
    let lead = c.tokens();
    let cond = conditioning(c, inputs);

    let pair = c.g.concat(&[inputs.y_bar, inputs.y_t], 2);
    let tokens = c.linear(pair, "sgct.in", &lead, ch);
    let joints2d = c.linear(inputs.x2d, "sgct.x2d", &lead, ch);
    let pos = c.g.param("sgct.pos");
    let pos = c.g.broadcast(pos, &[c.batch, c.n, ch]);
    let h = c.g.add(tokens, joints2d);
    let mut h = c.g.add(h, pos);

    for k in 0..c.cfg.blocks {
        let p = format!("sgct.block{k}");
        let mods = c.linear(cond, &format!("{p}.ada"), &[c.batch], 9 * ch);
        let m = split_mods(c, mods, 9);
        let sublayers: [(usize, Sublayer, String); 3] = [
            (0, graph_conv, format!("{p}.gcn")),
            (3, attention, format!("{p}.attn")),
            (6, feed_forward, format!("{p}.ffn")),
        ];
        for (base, layer, name) in sublayers {
            let x = modulate(c, h, m[base], m[base + 1]);
            let y = layer(c, x, &name);
            let gated = c.g.mul(m[base + 2], y);
            h = c.g.add(h, gated);
        }
    }

    let mods = c.linear(cond, "sgct.final.ada", &[c.batch], 2 * ch);
    let m = split_mods(c, mods, 2);
    let x = modulate(c, h, m[0], m[1]);
    let delta = c.linear(x, "sgct.final", &lead, 3);
    c.g.add(inputs.y_bar, delta)
}
