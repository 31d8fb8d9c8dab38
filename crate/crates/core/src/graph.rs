//! Define-then-run computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Because every op can only
//! reference nodes that already exist, the node order is a topological order
//! and the graph is acyclic by construction. Shapes are checked when the graph
//! is evaluated, so one graph can be reused for any batch size that its
//! reshape/broadcast targets agree with.
//!
//! The primitive set is deliberately small: add, sub, mul, matmul, transpose,
//! reshape, concat, slice, sum, mean, relu, gelu, sigmoid, tanh, softmax,
//! layer normalization and broadcast, plus `sqrt` and constant `scale`.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{self, MatView, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose { x: NodeId, a: usize, b: usize },
    Reshape { x: NodeId, shape: Vec<usize> },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, eps: f64 },
    Broadcast { x: NodeId, shape: Vec<usize> },
    Sqrt(NodeId),
    Scale { x: NodeId, factor: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Broadcast { .. } => "broadcast",
            Op::Sqrt(_) => "sqrt",
            Op::Scale { .. } => "scale",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Transpose { x, .. }
            | Op::Reshape { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::Sqrt(x) => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Named tensors supplied to [`evaluate`] for inputs and parameters.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Values of every node after a forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    outputs: BTreeMap<String, NodeId>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| &self.values[id.0])
    }

    pub fn into_value(mut self, node: NodeId) -> Tensor {
        self.values.swap_remove(node.0)
    }

    pub fn named_outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.values[id.0].clone()))
            .collect()
    }
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a human-readable label that shows up in shape errors.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Differentiable leaf. Requesting the same name twice returns the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId, a: usize, b: usize) -> NodeId {
        self.push(Op::Transpose { x, a, b })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape { x, shape: shape.to_vec() })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { x, axis, start, end })
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Sum { x, axis })
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Mean { x, axis })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Broadcast { x, shape: shape.to_vec() })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sqrt(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { x, factor })
    }

    fn shape_err(&self, id: usize, detail: String) -> Error {
        let node = &self.nodes[id];
        Error::Shape {
            node: id,
            op: node.op.name(),
            label: node.label.as_ref().map(|l| format!(" `{l}`")).unwrap_or_default(),
            detail,
        }
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            req[i] = match &node.op {
                Op::Param(_) => true,
                op => op.inputs().iter().any(|x| req[x.0]),
            };
        }
        req
    }
}

/// Runs the forward pass and returns the value of every node.
pub fn evaluate(graph: &Graph, bindings: &Bindings<'_>) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        let v = forward_op(graph, id, &node.op, &values, bindings)?;
        values.push(v);
    }
    Ok(Evaluation { values, outputs: graph.outputs.clone() })
}

/// Gradient of the scalar `output` with respect to every parameter node.
pub fn backward(graph: &Graph, output: NodeId, bindings: &Bindings<'_>) -> Result<Gradients> {
    value_and_grad(graph, output, bindings).map(|(_, g)| g)
}

/// Forward pass plus reverse-mode accumulation from a scalar output.
pub fn value_and_grad(
    graph: &Graph,
    output: NodeId,
    bindings: &Bindings<'_>,
) -> Result<(Evaluation, Gradients)> {
    let eval = evaluate(graph, bindings)?;
    let out_val = eval.value(output);
    if out_val.numel() != 1 {
        return Err(Error::NotScalar { node: output.0, shape: out_val.shape().to_vec() });
    }
    let req = graph.requires_grad();
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    grads[output.0] = Some(Tensor::ones(out_val.shape()));

    for id in (0..=output.0).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &graph.nodes[id];
        if let Op::Param(_) = node.op {
            grads[id] = Some(g);
            continue;
        }
        let inputs = node.op.inputs();
        if !inputs.iter().any(|x| req[x.0]) {
            continue;
        }
        let contributions = backward_op(&node.op, &eval.values, &eval.values[id], &g, &req);
        for (input, contrib) in inputs.into_iter().zip(contributions) {
            if let Some(c) = contrib {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
    }

    let mut out = Gradients::new();
    for (name, id) in &graph.params {
        let g = grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(eval.value(*id).shape()));
        out.insert(name.clone(), g);
    }
    Ok((eval, out))
}

fn same_shape(graph: &Graph, id: usize, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(graph.shape_err(id, format!("operands {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(graph: &Graph, id: usize, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(graph.shape_err(id, format!("axis {axis} out of range for {:?}", x.shape())));
    }
    Ok(())
}

fn forward_op(
    graph: &Graph,
    id: usize,
    op: &Op,
    values: &[Tensor],
    bindings: &Bindings<'_>,
) -> Result<Tensor> {
    let v = |n: &NodeId| &values[n.0];
    Ok(match op {
        Op::Input(name) | Op::Param(name) => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Unbound(name.clone()))?,
        Op::Constant(t) => t.clone(),
        Op::Add(a, b) => {
            same_shape(graph, id, v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(graph, id, v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(graph, id, v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::MatMul(a, b) => matmul_forward(v(a), v(b)).map_err(|d| graph.shape_err(id, d))?,
        Op::Transpose { x, a, b } => {
            check_axis(graph, id, v(x), *a)?;
            check_axis(graph, id, v(x), *b)?;
            tensor::swap_axes(v(x), *a, *b)
        }
        Op::Reshape { x, shape } => v(x)
            .reshape(shape)
            .map_err(|_| graph.shape_err(id, format!("{:?} -> {shape:?}", v(x).shape())))?,
        Op::Concat { xs, axis } => {
            let parts: Vec<&Tensor> = xs.iter().map(v).collect();
            concat_forward(&parts, *axis).map_err(|d| graph.shape_err(id, d))?
        }
        Op::Slice { x, axis, start, end } => {
            check_axis(graph, id, v(x), *axis)?;
            if start >= end || *end > v(x).shape()[*axis] {
                return Err(graph.shape_err(
                    id,
                    format!("range {start}..{end} on axis {axis} of {:?}", v(x).shape()),
                ));
            }
            slice_forward(v(x), *axis, *start, *end)
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            if let Some(a) = axis {
                check_axis(graph, id, v(x), *a)?;
            }
            let s = sum_forward(v(x), *axis);
            if matches!(op, Op::Mean { .. }) {
                let count = (v(x).numel() / s.numel()) as f64;
                s.map(|e| e / count)
            } else {
                s
            }
        }
        Op::Relu(x) => v(x).map(|e| e.max(0.0)),
        Op::Gelu(x) => v(x).map(gelu),
        Op::Sigmoid(x) => v(x).map(sigmoid),
        Op::Tanh(x) => v(x).map(f64::tanh),
        Op::Softmax(x) => {
            if v(x).rank() == 0 {
                return Err(graph.shape_err(id, "softmax of a scalar".into()));
            }
            softmax_forward(v(x))
        }
        Op::LayerNorm { x, eps } => {
            if v(x).rank() == 0 {
                return Err(graph.shape_err(id, "layer norm of a scalar".into()));
            }
            layer_norm_forward(v(x), *eps).0
        }
        Op::Broadcast { x, shape } => {
            if !tensor::can_broadcast(v(x).shape(), shape) {
                return Err(graph.shape_err(id, format!("cannot broadcast {:?} to {shape:?}", v(x).shape())));
            }
            tensor::broadcast_to(v(x), shape)
        }
        Op::Sqrt(x) => v(x).map(f64::sqrt),
        Op::Scale { x, factor } => v(x).map(|e| e * factor),
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> std::result::Result<Tensor, String> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(format!("matmul needs rank >= 2 operands, got {:?} x {:?}", a.shape(), b.shape()));
    }
    let k = a.shape()[ra - 1];
    if b.shape()[rb - 2] != k {
        return Err(format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let n = b.shape()[rb - 1];
    if rb == 2 {
        let m = a.numel() / k;
        let mut out = vec![0.0; m * n];
        tensor::gemm(MatView::new(a.data(), m, k), MatView::new(b.data(), k, n), 0.0, &mut out);
        let mut shape = a.shape()[..ra - 1].to_vec();
        shape.push(n);
        return Ok(Tensor::from_parts(shape, out));
    }
    let m = a.shape()[ra - 2];
    let batch: usize = b.shape()[..rb - 2].iter().product();
    if ra != 2 && a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(format!("batch dimensions differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let a_i = if ra == 2 { a.data() } else { &a.data()[i * m * k..(i + 1) * m * k] };
        tensor::gemm(
            MatView::new(a_i, m, k),
            MatView::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = b.shape()[..rb - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, need_a: bool, need_b: bool) -> (Option<Tensor>, Option<Tensor>) {
    let (ra, rb) = (a.rank(), b.rank());
    let k = a.shape()[ra - 1];
    let n = b.shape()[rb - 1];
    if rb == 2 {
        let m = a.numel() / k;
        let ga = need_a.then(|| {
            let mut d = vec![0.0; m * k];
            tensor::gemm(MatView::new(g.data(), m, n), MatView::new(b.data(), k, n).t(), 0.0, &mut d);
            Tensor::from_parts(a.shape().to_vec(), d)
        });
        let gb = need_b.then(|| {
            let mut d = vec![0.0; k * n];
            tensor::gemm(MatView::new(a.data(), m, k).t(), MatView::new(g.data(), m, n), 0.0, &mut d);
            Tensor::from_parts(b.shape().to_vec(), d)
        });
        return (ga, gb);
    }
    let m = a.shape()[ra - 2];
    let batch: usize = b.shape()[..rb - 2].iter().product();
    let mut da = need_a.then(|| vec![0.0; a.numel()]);
    let mut db = need_b.then(|| vec![0.0; b.numel()]);
    for i in 0..batch {
        let g_i = &g.data()[i * m * n..(i + 1) * m * n];
        let b_i = &b.data()[i * k * n..(i + 1) * k * n];
        let a_range = if ra == 2 { 0..m * k } else { i * m * k..(i + 1) * m * k };
        if let Some(da) = da.as_mut() {
            // shared left operand accumulates across the batch
            let beta = if ra == 2 && i > 0 { 1.0 } else { 0.0 };
            tensor::gemm(
                MatView::new(g_i, m, n),
                MatView::new(b_i, k, n).t(),
                beta,
                &mut da[a_range.clone()],
            );
        }
        if let Some(db) = db.as_mut() {
            tensor::gemm(
                MatView::new(&a.data()[a_range], m, k).t(),
                MatView::new(g_i, m, n),
                0.0,
                &mut db[i * k * n..(i + 1) * k * n],
            );
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> std::result::Result<Tensor, String> {
    let first = parts.first().ok_or("concat of zero tensors")?;
    if axis >= first.rank() {
        return Err(format!("axis {axis} out of range for {:?}", first.shape()));
    }
    let mut total = 0;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(format!("cannot concat {:?} with {:?} on axis {axis}", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, inner) = outer_inner(x.shape(), axis);
    let dim = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * dim * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Tensor::from_parts(shape, out)
}

fn slice_backward(shape: &[usize], axis: usize, start: usize, g: &Tensor) -> Tensor {
    let (outer, inner) = outer_inner(shape, axis);
    let dim = shape[axis];
    let len = g.shape()[axis];
    let mut out = vec![0.0; shape.iter().product()];
    for o in 0..outer {
        let dst = o * dim * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn sum_forward(x: &Tensor, axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::scalar(x.data().iter().sum()),
        Some(axis) => {
            let (outer, inner) = outer_inner(x.shape(), axis);
            let dim = x.shape()[axis];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += s;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        }
    }
}

fn sum_backward(shape: &[usize], axis: Option<usize>, g: &Tensor) -> Tensor {
    match axis {
        None => Tensor::full(shape, g.data()[0]),
        Some(axis) => {
            let mut kept = shape.to_vec();
            kept[axis] = 1;
            let g = Tensor::from_parts(kept, g.data().to_vec());
            tensor::broadcast_to(&g, shape)
        }
    }
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            s += *e;
        }
        for e in row.iter_mut() {
            *e /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Returns the normalized tensor and the per-row inverse standard deviation.
fn layer_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    let mut inv = Vec::with_capacity(out.len() / d);
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for e in row.iter_mut() {
            *e = (*e - mean) * r;
        }
        inv.push(r);
    }
    (Tensor::from_parts(x.shape().to_vec(), out), inv)
}

fn backward_op(op: &Op, values: &[Tensor], out: &Tensor, g: &Tensor, req: &[bool]) -> Vec<Option<Tensor>> {
    let v = |n: &NodeId| &values[n.0];
    let need = |n: &NodeId| req[n.0];
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
        Op::Add(a, b) => vec![need(a).then(|| g.clone()), need(b).then(|| g.clone())],
        Op::Sub(a, b) => vec![need(a).then(|| g.clone()), need(b).then(|| g.map(|e| -e))],
        Op::Mul(a, b) => vec![
            need(a).then(|| g.zip_map(v(b), |x, y| x * y)),
            need(b).then(|| g.zip_map(v(a), |x, y| x * y)),
        ],
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(v(a), v(b), g, need(a), need(b));
            vec![ga, gb]
        }
        Op::Transpose { a, b, .. } => vec![Some(tensor::swap_axes(g, *a, *b))],
        Op::Reshape { x, .. } => vec![Some(Tensor::from_parts(v(x).shape().to_vec(), g.data().to_vec()))],
        Op::Concat { xs, axis } => {
            let mut start = 0;
            xs.iter()
                .map(|x| {
                    let len = v(x).shape()[*axis];
                    let part = need(x).then(|| slice_forward(g, *axis, start, start + len));
                    start += len;
                    part
                })
                .collect()
        }
        Op::Slice { x, axis, start, .. } => vec![Some(slice_backward(v(x).shape(), *axis, *start, g))],
        Op::Sum { x, axis } => vec![Some(sum_backward(v(x).shape(), *axis, g))],
        Op::Mean { x, axis } => {
            let count = (v(x).numel() / g.numel()) as f64;
            vec![Some(sum_backward(v(x).shape(), *axis, g).map(|e| e / count))]
        }
        Op::Relu(x) => vec![Some(g.zip_map(v(x), |d, e| if e > 0.0 { d } else { 0.0 }))],
        Op::Gelu(x) => vec![Some(g.zip_map(v(x), |d, e| d * gelu_grad(e)))],
        Op::Sigmoid(_) => vec![Some(g.zip_map(out, |d, y| d * y * (1.0 - y)))],
        Op::Tanh(_) => vec![Some(g.zip_map(out, |d, y| d * (1.0 - y * y)))],
        Op::Softmax(_) => {
            let d = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.numel()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((o, y), g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::LayerNorm { x, eps } => {
            let (xhat, inv) = layer_norm_forward(v(x), *eps);
            let d = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.numel()];
            for (row, ((dxr, xr), gr)) in dx
                .chunks_mut(d)
                .zip(xhat.data().chunks(d))
                .zip(g.data().chunks(d))
                .enumerate()
            {
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / d as f64;
                for ((o, xh), g) in dxr.iter_mut().zip(xr).zip(gr) {
                    *o = inv[row] * (g - mg - xh * mgx);
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::Broadcast { x, .. } => vec![Some(tensor::reduce_to(g, v(x).shape()))],
        Op::Sqrt(_) => vec![Some(g.zip_map(out, |d, y| 0.5 * d / y))],
        Op::Scale { factor, .. } => vec![Some(g.map(|d| d * factor))],
    }
}
