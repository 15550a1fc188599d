//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A `Graph` is a flat list of primitive nodes in topological order, rebuilt
//! from scratch for every batch. Named `Input` nodes bind to a [`ParamSet`]
//! at evaluation time; `Const` nodes carry values baked in at build time and
//! never receive gradients. `Detach` blocks gradient flow exactly: the
//! forward value passes through unchanged and the backward contribution
//! through the node is identically zero.
//!
//! Shapes are fixed when a node is created, so shape errors surface at graph
//! construction. Binary elementwise ops accept equal shapes or a scalar
//! (single-element) operand on either side; no other broadcasting exists.

mod adam;
mod eval;

pub use adam::{adam_step, AdamParams, AdamState};

use std::collections::BTreeMap;

use crate::{Error, Result, Tensor};

/// Named map from parameter name to tensor with deterministic (sorted)
/// iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Copy every entry of `other` into `self` under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, value) in other.iter() {
            self.insert(format!("{prefix}{name}"), value.clone());
        }
    }

    /// Sub-set of entries whose names start with `prefix`, prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, value.clone());
            }
        }
        out
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            out.insert(name.clone(), Tensor::zeros(value.shape()));
        }
        out
    }

    /// self += s * other, entrywise over shared names.
    pub fn axpy(&mut self, s: f64, other: &ParamSet) {
        for (name, value) in self.entries.iter_mut() {
            if let Some(o) = other.get(name) {
                *value = value.axpy(s, o);
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(|t| t.sq_norm()).sum()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        let mut m: f64 = 0.0;
        for (name, value) in self.iter() {
            if let Some(o) = other.get(name) {
                m = m.max(value.max_abs_diff(o));
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }
}

/// Index of a node within its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Tanh(NodeId),
    Silu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Softmax over the last axis ([n] or rowwise on [m, n]).
    Softmax(NodeId),
    /// Log-sum-exp over the last axis: [n] -> [1], [m, n] -> [m].
    LogSumExp(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    Detach(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Detach(_) => "detach",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
}

/// A computation graph: nodes in topological (construction) order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub(crate) fn node_label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Input(name) => format!("#{} input `{name}`", id.0),
            op => format!("#{} {}", id.0, op.name()),
        }
    }

    /// Names of the input nodes, in sorted order.
    pub fn input_names(&self) -> impl Iterator<Item = &String> {
        self.inputs.keys()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    fn mismatch(&self, op: &'static str, expected: &[usize], got: &[usize]) -> Error {
        Error::ShapeMismatch {
            node: format!("#{} {op}", self.nodes.len()),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// Register a named input. Repeated registration under the same name
    /// returns the existing node; the declared shape must agree.
    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        if let Some(&id) = self.inputs.get(&name) {
            if self.nodes[id.0].shape != shape {
                return Err(self.mismatch("input", &self.nodes[id.0].shape.clone(), shape));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input(name.clone()), shape.to_vec());
        self.inputs.insert(name, id);
        Ok(id)
    }

    /// Register every entry of a [`ParamSet`] as an input node.
    pub fn inputs_from(&mut self, params: &ParamSet, prefix: &str) -> Result<()> {
        for (name, value) in params.iter() {
            self.input(format!("{prefix}{name}"), value.shape())?;
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn binary_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(self.mismatch(op, sa, sb))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), shape))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, s), shape)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, s), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &sa, &sb));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// x @ w + b with the bias broadcast over rows: [m,k] x [k,n] + [n].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(self.mismatch("affine", &sx, &sw));
        }
        if sb != [sw[1]] {
            return Err(self.mismatch("affine", &[sw[1]], &sb));
        }
        Ok(self.push(Op::Affine { x, w, b }, vec![sx[0], sw[1]]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Silu(a), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sqrt(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape.len() > 2 {
            return Err(self.mismatch("softmax", &[0], &shape));
        }
        Ok(self.push(Op::Softmax(a), shape))
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out = match shape.len() {
            1 => vec![1],
            2 => vec![shape[0]],
            _ => return Err(self.mismatch("logsumexp", &[0], &shape)),
        };
        Ok(self.push(Op::LogSumExp(a), out))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "empty part list"));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut shape = self.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            let sp = self.shape(p);
            if sp.len() != rank {
                return Err(self.mismatch("concat", &shape, sp));
            }
            for d in 0..rank {
                if d != axis && sp[d] != shape[d] {
                    return Err(self.mismatch("concat", &shape, sp));
                }
            }
            shape[axis] += sp[axis];
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {sx:?}", start + len),
            ));
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            shape,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = self.shape(x).iter().product();
        let target: usize = shape.iter().product();
        if numel != target {
            return Err(self.mismatch("reshape", self.shape(x), shape));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(self.mismatch("transpose", &[0, 0], &sx));
        }
        Ok(self.push(Op::Transpose(x), vec![sx[1], sx[0]]))
    }

    /// Identity in the forward pass; blocks gradients exactly.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Detach(x), shape)
    }

    /// Designate the output node. Defaults to the last node when unset.
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Result<NodeId> {
        match self.output {
            Some(id) => Ok(id),
            None if !self.nodes.is_empty() => Ok(NodeId(self.nodes.len() - 1)),
            None => Err(Error::invalid("Graph::output", "empty graph")),
        }
    }

    // Convenience composites used throughout the model code.

    /// Sum of squared entries as a scalar node.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        self.sum(sq)
    }

    /// Mean squared difference between two same-shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }
}

/// Evaluate the designated output node. Pure: no state is mutated.
pub fn forward_eval(graph: &Graph, inputs: &ParamSet) -> Result<Tensor> {
    let values = eval::forward(graph, inputs, None)?;
    Ok(values[graph.output()?.0].clone())
}

/// Gradient of the scalar output with respect to every input parameter.
///
/// Inputs not reached by any differentiable path (for example, those behind
/// a `detach`) get explicit zero gradients.
pub fn backward(graph: &Graph, inputs: &ParamSet) -> Result<ParamSet> {
    eval::backward(graph, inputs).map(|(_, grads)| grads)
}

/// One combined forward/backward pass: scalar output value plus gradients.
pub fn eval_with_grads(graph: &Graph, inputs: &ParamSet) -> Result<(f64, ParamSet)> {
    eval::backward(graph, inputs)
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the max over parameter elements of
/// `|analytic - fd| / max(1e-8, |analytic| + |fd|)`. The FD evaluation pins
/// every `detach` node at its unperturbed value, so detached branches are
/// treated as constants exactly as the backward pass treats them.
pub fn grad_check(graph: &Graph, inputs: &ParamSet, fd_step: f64) -> Result<f64> {
    if fd_step <= 0.0 {
        return Err(Error::invalid("grad_check", "fd_step must be positive"));
    }
    let analytic = backward(graph, inputs)?;
    let base_values = eval::forward(graph, inputs, None)?;
    let pinned = eval::detach_values(graph, &base_values);
    let out_id = graph.output()?;

    let mut max_rel = 0.0f64;
    let names: Vec<String> = inputs.names().cloned().collect();
    for name in names {
        let tensor = inputs.get(&name).expect("name from iteration").clone();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingInput { name: name.clone() })?
            .clone();
        for i in 0..tensor.numel() {
            let orig = tensor.values()[i];
            let mut probe = inputs.clone();

            probe.get_mut(&name).unwrap().values_mut()[i] = orig + fd_step;
            let up = eval::forward(graph, &probe, Some(&pinned))?[out_id.0].item();
            probe.get_mut(&name).unwrap().values_mut()[i] = orig - fd_step;
            let down = eval::forward(graph, &probe, Some(&pinned))?[out_id.0].item();

            let fd = (up - down) / (2.0 * fd_step);
            let a = grad.values()[i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests;
