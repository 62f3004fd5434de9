//! Reverse-mode differentiable operation graph over a fixed op vocabulary.
//!
//! Graphs are built once per configuration (shapes are static), then run
//! many times. Nodes are appended in topological order by construction;
//! shape checking happens at build time and again for bound inputs at
//! `forward`. Parameters live in a registry on the graph and receive
//! accumulated gradients from `backward`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Real;
use crate::tensor::Tensor;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {node} ({kind}): {detail}")]
    Shape {
        node: NodeId,
        kind: &'static str,
        detail: String,
    },
    #[error("duplicate name `{0}` in graph")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("input `{name}` expects shape {expected:?}, got {got:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input `{0}` not bound at forward")]
    MissingInput(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("output `{name}` is not scalar (shape {shape:?})")]
    NonScalarSink { name: String, shape: Vec<usize> },
    #[error("finite-difference step {0} outside [1e-6, 1e-2]")]
    StepOutOfRange(f64),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input {
        name: String,
    },
    Param {
        index: usize,
    },
    Const {
        value: Arc<Tensor<T>>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    },
    Hadamard {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    Exp {
        x: NodeId,
    },
    Log {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    MeanAxes {
        x: NodeId,
        axes: Vec<usize>,
    },
    L2Normalize {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Reshape {
        x: NodeId,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const { .. } => "const",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Hadamard { .. } => "hadamard",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Relu { .. } => "relu",
            Op::Square { .. } => "square",
            Op::Sqrt { .. } => "sqrt",
            Op::MeanAxes { .. } => "mean",
            Op::L2Normalize { .. } => "l2norm",
            Op::Sum { .. } => "sum",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ParamEntry<T> {
    name: String,
    node: NodeId,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Guard for `l2norm`: degenerate rows are divided by this instead of 0.
const NORM_GUARD: f64 = 1e-12;
/// Guard for the derivative of `sqrt` at 0.
const SQRT_GRAD_GUARD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    /// Whether gradients can flow to this node (it is a parameter/input or
    /// has one upstream); backward skips everything else.
    needs_grad: Vec<bool>,
    params: Vec<ParamEntry<T>>,
    param_index: HashMap<String, usize>,
    inputs: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Option<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    // im2col buffers saved by conv2d forward for reuse in backward
    saved_cols: HashMap<NodeId, Vec<T>>,
    ran_forward: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            inputs: HashMap::new(),
            outputs: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            saved_cols: HashMap::new(),
            ran_forward: false,
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        let needs = match &op {
            Op::Input { .. } | Op::Param { .. } => true,
            Op::Const { .. } => false,
            other => op_inputs(other).iter().any(|&i| self.needs_grad[i]),
        };
        self.nodes.push(Node { op, shape });
        self.needs_grad.push(needs);
        self.values.push(None);
        self.grads.push(None);
        id
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        self.shape_of(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Count of nodes per op kind, for structural assertions.
    pub fn op_census(&self) -> HashMap<&'static str, usize> {
        let mut census = HashMap::new();
        for node in &self.nodes {
            *census.entry(node.op.kind()).or_insert(0) += 1;
        }
        census
    }

    fn err(&self, node: NodeId, kind: &'static str, detail: String) -> GraphError {
        GraphError::Shape { node, kind, detail }
    }

    // ── construction ────────────────────────────────────────────────

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, init: Tensor<T>) -> Result<NodeId, GraphError> {
        if self.param_index.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let index = self.params.len();
        let shape = init.shape().to_vec();
        let id = self.push(Op::Param { index }, shape.clone());
        let grad = Tensor::zeros(&shape);
        self.params.push(ParamEntry {
            name: name.to_string(),
            node: id,
            value: init,
            grad,
        });
        self.param_index.insert(name.to_string(), index);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(
            Op::Const {
                value: Arc::new(value),
            },
            shape,
        )
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(T::cast(value)))
    }

    pub fn matmul(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        let id = self.nodes.len();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.err(id, "matmul", format!("needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(self.err(
                id,
                "matmul",
                format!("inner extents differ: {sa:?} (trans={trans_a}) vs {sb:?} (trans={trans_b})"),
            ));
        }
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            vec![m, n],
        ))
    }

    /// 2-D convolution, NHWC input, `kh×kw×cin×cout` weight.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let si = self.shape_of(input).to_vec();
        let sw = self.shape_of(weight).to_vec();
        let id = self.nodes.len();
        if si.len() != 4 || sw.len() != 4 {
            return Err(self.err(id, "conv2d", format!("needs 4-D input/weight, got {si:?}/{sw:?}")));
        }
        if si[3] != sw[2] {
            return Err(self.err(
                id,
                "conv2d",
                format!("input channels {} do not match weight {}", si[3], sw[2]),
            ));
        }
        if stride == 0 {
            return Err(self.err(id, "conv2d", "stride must be positive".into()));
        }
        let (h, w, kh, kw) = (si[1], si[2], sw[0], sw[1]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(self.err(id, "conv2d", format!("kernel {kh}x{kw} larger than padded input")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            vec![si[0], ho, wo, sw[3]],
        ))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        let id = self.nodes.len();
        if sa != sb {
            return Err(self.err(id, "hadamard", format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Hadamard { a, b }, sa))
    }

    /// Elementwise addition; `b` may also be a vector broadcast over the
    /// last axis of `a` (bias addition).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        let id = self.nodes.len();
        let bias_like = sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0];
        if sa != sb && !bias_like {
            return Err(self.err(id, "add", format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Add { a, b }, sa))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(
            Op::Scale {
                x,
                factor: T::cast(factor),
            },
            shape,
        )
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Exp { x }, shape)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Log { x }, shape)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Relu { x }, shape)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Square { x }, shape)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Sqrt { x }, shape)
    }

    /// Mean over the listed axes; reduced axes are removed from the shape.
    pub fn mean_axes(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, GraphError> {
        let sx = self.shape_of(x).to_vec();
        let id = self.nodes.len();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= sx.len()) {
            return Err(self.err(id, "mean", format!("bad axes {axes:?} for shape {sx:?}")));
        }
        let shape: Vec<usize> = sx
            .iter()
            .enumerate()
            .filter(|(i, _)| !sorted.contains(i))
            .map(|(_, &e)| e)
            .collect();
        Ok(self.push(Op::MeanAxes { x, axes: sorted }, shape))
    }

    /// Normalize over the last axis, guarding zero rows by `max(‖v‖, 1e-12)`.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(x).to_vec();
        let id = self.nodes.len();
        if shape.is_empty() {
            return Err(self.err(id, "l2norm", "cannot normalize a scalar".into()));
        }
        Ok(self.push(Op::L2Normalize { x }, shape))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x }, Vec::new())
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        let id = self.nodes.len();
        if inputs.is_empty() {
            return Err(self.err(id, "concat", "no inputs".into()));
        }
        let first = self.shape_of(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(self.err(id, "concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut total = 0;
        for &node in inputs {
            let s = self.shape_of(node);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(self.err(id, "concat", format!("incompatible shapes {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        let sx = self.shape_of(x).to_vec();
        let id = self.nodes.len();
        let old: usize = sx.iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(self.err(id, "reshape", format!("volume changes: {sx:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec()))
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    // ── parameter registry ──────────────────────────────────────────

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        let idx = self
            .param_index
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        Ok(&self.params[*idx].value)
    }

    pub fn set_param_value(&mut self, name: &str, value: Tensor<T>) -> Result<(), GraphError> {
        let idx = *self
            .param_index
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        let entry = &mut self.params[idx];
        if entry.value.shape() != value.shape() {
            return Err(GraphError::InputShape {
                name: name.to_string(),
                expected: entry.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn param_grad(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        let idx = self
            .param_index
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        Ok(&self.params[*idx].grad)
    }

    /// Total number of scalar entries across registered parameters.
    pub fn param_scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    /// Visit `(name, value, grad)` for every parameter, mutably (optimizer hook).
    pub fn update_params(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>, &Tensor<T>)) {
        for p in &mut self.params {
            f(&p.name, &mut p.value, &p.grad);
        }
    }

    pub fn param_values(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn input_grad(&self, name: &str) -> Option<&Tensor<T>> {
        let id = *self.inputs.get(name)?;
        self.grads[id].as_ref()
    }

    // ── execution ───────────────────────────────────────────────────

    pub fn forward(
        &mut self,
        inputs: &[(&str, &Tensor<T>)],
    ) -> Result<HashMap<String, Tensor<T>>, GraphError> {
        let mut bound: HashMap<&str, &Tensor<T>> = HashMap::new();
        for (name, tensor) in inputs {
            bound.insert(name, tensor);
        }
        for (name, &id) in &self.inputs {
            match bound.get(name.as_str()) {
                None => return Err(GraphError::MissingInput(name.clone())),
                Some(t) => {
                    if t.shape() != self.nodes[id].shape {
                        return Err(GraphError::InputShape {
                            name: name.clone(),
                            expected: self.nodes[id].shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                }
            }
        }
        for id in 0..self.nodes.len() {
            // constants never change; evaluate them once
            if self.values[id].is_some() && matches!(self.nodes[id].op, Op::Const { .. }) {
                continue;
            }
            // recycle this node's previous buffer (shapes are static)
            let recycled = self.values[id].take().map(Tensor::into_data);
            let value = self.eval_node(id, &bound, recycled)?;
            self.values[id] = Some(value);
        }
        self.ran_forward = true;
        let mut out = HashMap::new();
        for (name, id) in &self.outputs {
            out.insert(name.clone(), self.values[*id].clone().expect("forward ran"));
        }
        Ok(out)
    }

    /// Value of a marked output after `forward`.
    pub fn output(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        let id = self
            .outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| GraphError::UnknownOutput(name.to_string()))?;
        self.values[id]
            .as_ref()
            .ok_or(GraphError::BackwardBeforeForward)
    }

    fn value(&self, id: NodeId) -> &Tensor<T> {
        self.values[id].as_ref().expect("value computed")
    }

    fn eval_node(
        &mut self,
        id: NodeId,
        bound: &HashMap<&str, &Tensor<T>>,
        recycled: Option<Vec<T>>,
    ) -> Result<Tensor<T>, GraphError> {
        let op = self.nodes[id].op.clone();
        let node_shape = self.nodes[id].shape.clone();
        // reuse last forward's buffer when the length matches
        let volume: usize = node_shape.iter().product();
        let mut buf = match recycled {
            Some(v) if v.len() == volume => v,
            _ => vec![T::zero(); volume],
        };
        let out = match &op {
            Op::Input { name } => {
                let src = *bound.get(name.as_str()).expect("validated");
                buf.copy_from_slice(src.data());
                Tensor::new(node_shape, buf).expect("input shape")
            }
            Op::Param { index } => {
                buf.copy_from_slice(self.params[*index].value.data());
                Tensor::new(node_shape, buf).expect("param shape")
            }
            Op::Const { value } => (**value).clone(),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, ka) = if *trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (rsa, csa) = if *trans_a { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
                let (rsb, csb) = if *trans_b { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
                T::gemm_strided(
                    m, ka, n, va.data(), rsa, csa, vb.data(), rsb, csb, T::zero(), &mut buf,
                );
                Tensor::new(node_shape, buf).expect("matmul shape")
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (input, weight, stride, pad) = (*input, *weight, *stride, *pad);
                let rows_kdim = {
                    let x = self.value(input);
                    let w = self.value(weight);
                    let (b, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                    let (kh, kw) = (w.shape()[0], w.shape()[1]);
                    let ho = (h + 2 * pad - kh) / stride + 1;
                    let wo = (wd + 2 * pad - kw) / stride + 1;
                    (b * ho * wo, kh * kw * cin)
                };
                let mut cols = match self.saved_cols.remove(&id) {
                    Some(mut c) if c.len() == rows_kdim.0 * rows_kdim.1 => {
                        for v in &mut c {
                            *v = T::zero();
                        }
                        c
                    }
                    _ => vec![T::zero(); rows_kdim.0 * rows_kdim.1],
                };
                {
                    let x = self.value(input);
                    let (b, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                    let w = self.value(weight);
                    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
                    let ho = (h + 2 * pad - kh) / stride + 1;
                    let wo = (wd + 2 * pad - kw) / stride + 1;
                    im2col_into(x.data(), b, h, wd, cin, kh, kw, stride, pad, ho, wo, &mut cols);
                    T::gemm(rows_kdim.0, rows_kdim.1, cout, &cols, w.data(), T::zero(), &mut buf);
                }
                self.saved_cols.insert(id, cols);
                Tensor::new(node_shape, buf).expect("conv shape")
            }
            Op::Hadamard { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                for ((o, &x), &y) in buf.iter_mut().zip(va.data()).zip(vb.data()) {
                    *o = x * y;
                }
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Add { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if va.shape() == vb.shape() {
                    for ((o, &x), &y) in buf.iter_mut().zip(va.data()).zip(vb.data()) {
                        *o = x + y;
                    }
                } else {
                    // bias broadcast over the last axis
                    let cols = vb.len();
                    for (i, (o, &x)) in buf.iter_mut().zip(va.data()).enumerate() {
                        *o = x + vb.data()[i % cols];
                    }
                }
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                fill_map(&mut buf, self.value(*x), |v| v * f);
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Exp { x } => {
                fill_map(&mut buf, self.value(*x), |v| v.exp());
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Log { x } => {
                fill_map(&mut buf, self.value(*x), |v| v.ln());
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Relu { x } => {
                fill_map(&mut buf, self.value(*x), |v| {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                });
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Square { x } => {
                fill_map(&mut buf, self.value(*x), |v| v * v);
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Sqrt { x } => {
                fill_map(&mut buf, self.value(*x), |v| v.max(T::zero()).sqrt());
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::MeanAxes { x, axes } => {
                let vx = self.value(*x);
                let (_, reduced) = reduce_layout(vx.shape(), axes);
                let count = T::cast(reduced as f64);
                for v in &mut buf {
                    *v = T::zero();
                }
                if let Some((outer, mid, inner)) = contiguous_reduction(vx.shape(), axes) {
                    for o in 0..outer {
                        for r in 0..mid {
                            let src = (o * mid + r) * inner;
                            let dst = o * inner;
                            for i in 0..inner {
                                buf[dst + i] += vx.data()[src + i];
                            }
                        }
                    }
                } else {
                    let mapping = reduce_index_map(vx.shape(), axes);
                    for (i, &v) in vx.data().iter().enumerate() {
                        buf[mapping(i)] += v;
                    }
                }
                for v in &mut buf {
                    *v = *v / count;
                }
                Tensor::new(node_shape, buf).expect("reduced shape")
            }
            Op::L2Normalize { x } => {
                let vx = self.value(*x);
                let cols = *vx.shape().last().expect("non-scalar");
                buf.copy_from_slice(vx.data());
                for row in buf.chunks_mut(cols) {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let denom = norm.max(T::cast(NORM_GUARD));
                    for v in row.iter_mut() {
                        *v = *v / denom;
                    }
                }
                Tensor::new(node_shape, buf).expect("same shape")
            }
            Op::Sum { x } => Tensor::scalar(self.value(*x).data().iter().copied().sum()),
            Op::Concat { inputs, axis } => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|&n| self.value(n)).collect();
                concat_forward(&parts, *axis)
            }
            Op::Reshape { x } => {
                let vx = self.value(*x);
                buf.copy_from_slice(vx.data());
                Tensor::new(node_shape, buf).expect("same volume")
            }
        };
        Ok(out)
    }

    /// Reverse pass from seed gradients on named outputs. Gradients
    /// accumulate additively across fan-out; parameter gradients accumulate
    /// into the registry until `zero_grads`.
    pub fn backward(&mut self, seeds: &[(&str, Tensor<T>)]) -> Result<(), GraphError> {
        if !self.ran_forward {
            return Err(GraphError::BackwardBeforeForward);
        }
        for g in &mut self.grads {
            *g = None;
        }
        for (name, seed) in seeds {
            let id = self
                .outputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, id)| *id)
                .ok_or_else(|| GraphError::UnknownOutput(name.to_string()))?;
            if seed.shape() != self.nodes[id].shape {
                return Err(GraphError::InputShape {
                    name: name.to_string(),
                    expected: self.nodes[id].shape.clone(),
                    got: seed.shape().to_vec(),
                });
            }
            accumulate(&mut self.grads[id], seed);
        }
        for id in (0..self.nodes.len()).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            // consumers appear later in topological order, so this node's
            // gradient is final here; move it out instead of cloning
            let Some(grad_out) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &grad_out);
            if matches!(self.nodes[id].op, Op::Input { .. } | Op::Param { .. }) {
                self.grads[id] = Some(grad_out);
            }
        }
        for i in 0..self.params.len() {
            let node = self.params[i].node;
            if let Some(g) = &self.grads[node] {
                let entry = &mut self.params[i];
                for (dst, src) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += *src;
                }
            }
        }
        Ok(())
    }

    /// Seed the single scalar output named `name` with gradient 1.
    pub fn backward_scalar(&mut self, name: &str) -> Result<(), GraphError> {
        let id = self
            .outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| GraphError::UnknownOutput(name.to_string()))?;
        if !self.nodes[id].shape.is_empty() {
            return Err(GraphError::NonScalarSink {
                name: name.to_string(),
                shape: self.nodes[id].shape.clone(),
            });
        }
        self.backward(&[(name, Tensor::scalar(T::one()))])
    }

    fn backprop_node(&mut self, id: NodeId, grad_out: &Tensor<T>) {
        match self.nodes[id].op.clone() {
            Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                if self.needs_grad[a] {
                    let da = if !trans_a {
                        grad_out
                            .matmul(self.value(b), false, !trans_b)
                            .expect("shape checked")
                    } else {
                        self.value(b)
                            .matmul(grad_out, trans_b, true)
                            .expect("shape checked")
                    };
                    accumulate_owned(&mut self.grads[a], da);
                }
                if self.needs_grad[b] {
                    let db = if !trans_b {
                        self.value(a)
                            .matmul(grad_out, !trans_a, false)
                            .expect("shape checked")
                    } else {
                        grad_out
                            .matmul(self.value(a), true, trans_a)
                            .expect("shape checked")
                    };
                    accumulate_owned(&mut self.grads[b], db);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let x_shape = self.value(input).shape().to_vec();
                let w_shape = self.value(weight).shape().to_vec();
                let (b, h, wd, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
                let (kh, kw, cout) = (w_shape[0], w_shape[1], w_shape[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd + 2 * pad - kw) / stride + 1;
                let rows = b * ho * wo;
                let kdim = kh * kw * cin;
                let cols = self.saved_cols.get(&id).expect("saved by forward");
                if self.needs_grad[weight] {
                    // dW = colsᵀ · dOut
                    let mut dw = vec![T::zero(); kdim * cout];
                    T::gemm_strided(
                        kdim,
                        rows,
                        cout,
                        cols,
                        1,
                        kdim as isize,
                        grad_out.data(),
                        cout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                    );
                    accumulate_owned(
                        &mut self.grads[weight],
                        Tensor::new(w_shape, dw).expect("weight shape"),
                    );
                }
                if self.needs_grad[input] {
                    // dCols = dOut · Wᵀ
                    let mut dcols = vec![T::zero(); rows * kdim];
                    T::gemm_strided(
                        rows,
                        cout,
                        kdim,
                        grad_out.data(),
                        cout as isize,
                        1,
                        self.value(weight).data(),
                        1,
                        cout as isize,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, b, h, wd, cin, kh, kw, stride, pad, ho, wo);
                    accumulate_owned(
                        &mut self.grads[input],
                        Tensor::new(x_shape, dx).expect("input shape"),
                    );
                }
            }
            Op::Hadamard { a, b } => {
                let shape = grad_out.shape().to_vec();
                if self.needs_grad[a] {
                    let da: Vec<T> = grad_out
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    accumulate_owned(
                        &mut self.grads[a],
                        Tensor::new(shape.clone(), da).expect("shape"),
                    );
                }
                if self.needs_grad[b] {
                    let db: Vec<T> = grad_out
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    accumulate_owned(
                        &mut self.grads[b],
                        Tensor::new(shape, db).expect("shape"),
                    );
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad[a] {
                    accumulate(&mut self.grads[a], grad_out);
                }
                if self.needs_grad[b] {
                    let sb = self.value(b).shape().to_vec();
                    if sb == grad_out.shape() {
                        accumulate(&mut self.grads[b], grad_out);
                    } else {
                        let cols = sb[0];
                        let mut db = vec![T::zero(); cols];
                        for (i, &g) in grad_out.data().iter().enumerate() {
                            db[i % cols] += g;
                        }
                        accumulate_owned(
                            &mut self.grads[b],
                            Tensor::new(sb, db).expect("bias shape"),
                        );
                    }
                }
            }
            Op::Scale { x, factor } => {
                let dx = grad_out.map(|g| g * factor);
                accumulate_owned(&mut self.grads[x], dx);
            }
            Op::Exp { x } => {
                let dx: Vec<T> = grad_out
                    .data()
                    .iter()
                    .zip(self.value(id).data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let t = Tensor::new(grad_out.shape().to_vec(), dx).expect("shape");
                accumulate_owned(&mut self.grads[x], t);
            }
            Op::Log { x } => {
                let dx: Vec<T> = grad_out
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| g / v)
                    .collect();
                let t = Tensor::new(grad_out.shape().to_vec(), dx).expect("shape");
                accumulate_owned(&mut self.grads[x], t);
            }
            Op::Relu { x } => {
                let dx: Vec<T> = grad_out
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                let t = Tensor::new(grad_out.shape().to_vec(), dx).expect("shape");
                accumulate_owned(&mut self.grads[x], t);
            }
            Op::Square { x } => {
                let two = T::cast(2.0);
                let dx: Vec<T> = grad_out
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| two * v * g)
                    .collect();
                let t = Tensor::new(grad_out.shape().to_vec(), dx).expect("shape");
                accumulate_owned(&mut self.grads[x], t);
            }
            Op::Sqrt { x } => {
                let guard = T::cast(SQRT_GRAD_GUARD);
                let half = T::cast(0.5);
                let dx: Vec<T> = grad_out
                    .data()
                    .iter()
                    .zip(self.value(id).data())
                    .map(|(&g, &y)| g * half / y.max(guard))
                    .collect();
                let t = Tensor::new(grad_out.shape().to_vec(), dx).expect("shape");
                accumulate_owned(&mut self.grads[x], t);
            }
            Op::MeanAxes { x, axes } => {
                let vx_shape = self.value(x).shape().to_vec();
                let (_, reduced) = reduce_layout(&vx_shape, &axes);
                let inv = T::one() / T::cast(reduced as f64);
                let mut dx = vec![T::zero(); vx_shape.iter().product()];
                if let Some((outer, mid, inner)) = contiguous_reduction(&vx_shape, &axes) {
                    for o in 0..outer {
                        for r in 0..mid {
                            let dst = (o * mid + r) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                dx[dst + i] = grad_out.data()[src + i] * inv;
                            }
                        }
                    }
                } else {
                    let mapping = reduce_index_map(&vx_shape, &axes);
                    for (i, v) in dx.iter_mut().enumerate() {
                        *v = grad_out.data()[mapping(i)] * inv;
                    }
                }
                accumulate_owned(&mut self.grads[x], Tensor::new(vx_shape, dx).expect("shape"));
            }
            Op::L2Normalize { x } => {
                let vx = self.value(x);
                let vy = self.value(id);
                let shape = vx.shape().to_vec();
                let cols = *shape.last().expect("non-scalar");
                let guard = T::cast(NORM_GUARD);
                let mut dx = vec![T::zero(); vx.len()];
                for r in 0..vx.len() / cols {
                    let xs = &vx.data()[r * cols..(r + 1) * cols];
                    let ys = &vy.data()[r * cols..(r + 1) * cols];
                    let gs = &grad_out.data()[r * cols..(r + 1) * cols];
                    let norm = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let denom = norm.max(guard);
                    if norm > guard {
                        let dot: T = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = (gs[j] - ys[j] * dot) / denom;
                        }
                    } else {
                        for j in 0..cols {
                            dx[r * cols + j] = gs[j] / denom;
                        }
                    }
                }
                accumulate_owned(&mut self.grads[x], Tensor::new(shape, dx).expect("shape"));
            }
            Op::Sum { x } => {
                let g = grad_out.item();
                let shape = self.value(x).shape().to_vec();
                let dx = Tensor::full(&shape, g);
                accumulate_owned(&mut self.grads[x], dx);
            }
            Op::Concat { inputs, axis } => {
                let shapes: Vec<Vec<usize>> = inputs
                    .iter()
                    .map(|&n| self.value(n).shape().to_vec())
                    .collect();
                let parts = concat_backward(grad_out, &shapes, axis);
                for (&node, part) in inputs.iter().zip(parts) {
                    accumulate_owned(&mut self.grads[node], part);
                }
            }
            Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                let t = Tensor::new(shape, grad_out.data().to_vec()).expect("same volume");
                accumulate_owned(&mut self.grads[x], t);
            }
        }
    }

    /// Maximum over entries of `|analytic − central difference| / max(1, |analytic|)`
    /// for the named parameter and scalar output.
    pub fn finite_diff_check(
        &mut self,
        inputs: &[(&str, &Tensor<T>)],
        output: &str,
        param: &str,
        step: f64,
    ) -> Result<f64, GraphError> {
        if !(1e-6..=1e-2).contains(&step) {
            return Err(GraphError::StepOutOfRange(step));
        }
        let out_id = self
            .outputs
            .iter()
            .find(|(n, _)| n == output)
            .map(|(_, id)| *id)
            .ok_or_else(|| GraphError::UnknownOutput(output.to_string()))?;
        if !self.nodes[out_id].shape.is_empty() {
            return Err(GraphError::NonScalarSink {
                name: output.to_string(),
                shape: self.nodes[out_id].shape.clone(),
            });
        }
        let pidx = *self
            .param_index
            .get(param)
            .ok_or_else(|| GraphError::UnknownParam(param.to_string()))?;

        self.forward(inputs)?;
        self.zero_grads();
        self.backward_scalar(output)?;
        let analytic: Vec<f64> = self.params[pidx]
            .grad
            .data()
            .iter()
            .map(|g| g.to_f64().expect("finite"))
            .collect();

        let h = T::cast(step);
        let mut max_err = 0.0f64;
        for i in 0..analytic.len() {
            let orig = self.params[pidx].value.data()[i];
            self.params[pidx].value.data_mut()[i] = orig + h;
            let plus = self.forward(inputs)?[output].item().to_f64().expect("finite");
            self.params[pidx].value.data_mut()[i] = orig - h;
            let minus = self.forward(inputs)?[output].item().to_f64().expect("finite");
            self.params[pidx].value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
        // restore values for the unperturbed parameters
        self.forward(inputs)?;
        Ok(max_err)
    }
}

fn fill_map<T: Real>(buf: &mut [T], src: &Tensor<T>, f: impl Fn(T) -> T) {
    for (o, &v) in buf.iter_mut().zip(src.data()) {
        *o = f(v);
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<NodeId> {
    match op {
        Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => Vec::new(),
        Op::MatMul { a, b, .. } | Op::Hadamard { a, b } | Op::Add { a, b } => vec![*a, *b],
        Op::Conv2d { input, weight, .. } => vec![*input, *weight],
        Op::Scale { x, .. }
        | Op::Exp { x }
        | Op::Log { x }
        | Op::Relu { x }
        | Op::Square { x }
        | Op::Sqrt { x }
        | Op::MeanAxes { x, .. }
        | Op::L2Normalize { x }
        | Op::Sum { x }
        | Op::Reshape { x } => vec![*x],
        Op::Concat { inputs, .. } => inputs.clone(),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, grad: &Tensor<T>) {
    match slot {
        Some(existing) => {
            for (dst, src) in existing.data_mut().iter_mut().zip(grad.data()) {
                *dst += *src;
            }
        }
        None => *slot = Some(grad.clone()),
    }
}

/// Like [`accumulate`] but consumes the tensor, avoiding a copy when the
/// slot is empty (the common case: most nodes have one consumer).
fn accumulate_owned<T: Real>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (dst, src) in existing.data_mut().iter_mut().zip(grad.data()) {
                *dst += *src;
            }
        }
        None => *slot = Some(grad),
    }
}

/// When the reduced axes form one contiguous run, the tensor factors into
/// `outer × reduced × inner` blocks; returns those extents.
fn contiguous_reduction(shape: &[usize], axes: &[usize]) -> Option<(usize, usize, usize)> {
    if axes.is_empty() {
        return None;
    }
    let first = axes[0];
    for (i, &a) in axes.iter().enumerate() {
        if a != first + i {
            return None;
        }
    }
    let last = first + axes.len() - 1;
    let outer: usize = shape[..first].iter().product();
    let mid: usize = shape[first..=last].iter().product();
    let inner: usize = shape[last + 1..].iter().product();
    Some((outer, mid, inner))
}

/// Output shape and reduced-element count for a mean over `axes`.
fn reduce_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    let reduced: usize = axes.iter().map(|&a| shape[a]).product();
    (out, reduced)
}

/// Map a full-tensor linear index to the linear index of the kept axes.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> impl Fn(usize) -> usize {
    let rank = shape.len();
    let mut full_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        full_strides[i] = full_strides[i + 1] * shape[i + 1];
    }
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for &i in kept.iter().rev() {
        out_strides[i] = acc;
        acc *= shape[i];
    }
    let shape = shape.to_vec();
    move |linear: usize| {
        let mut rem = linear;
        let mut out = 0usize;
        for i in 0..shape.len() {
            let coord = rem / full_strides[i];
            rem %= full_strides[i];
            out += coord * out_strides[i];
        }
        out
    }
}

fn concat_forward<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.to_vec();
    shape[axis] = total_axis;
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for part in parts {
            let extent = part.shape()[axis];
            let start = o * extent * inner;
            data.extend_from_slice(&part.data()[start..start + extent * inner]);
        }
    }
    Tensor::new(shape, data).expect("concat shape")
}

fn concat_backward<T: Real>(grad: &Tensor<T>, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor<T>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let mut parts: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut offset = 0;
    let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
    for o in 0..outer {
        let base = o * total_axis * inner;
        let mut cursor = 0;
        for (pi, s) in shapes.iter().enumerate() {
            let extent = s[axis];
            let start = base + cursor * inner;
            parts[pi].extend_from_slice(&grad.data()[start..start + extent * inner]);
            cursor += extent;
        }
        offset += total_axis * inner;
    }
    debug_assert_eq!(offset, grad.len());
    parts
        .into_iter()
        .zip(shapes)
        .map(|(data, shape)| Tensor::new(shape.clone(), data).expect("split shape"))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col_into<T: Real>(
    input: &[T],
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let kdim = kh * kw * cin;
    debug_assert_eq!(out.len(), b * ho * wo * kdim);
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let base = row * kdim;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let dst = base + (ky * kw + kx) * cin;
                        out[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcols: &[T],
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let kdim = kh * kw * cin;
    let mut out = vec![T::zero(); b * h * w * cin];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let base = row * kdim;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let src = base + (ky * kw + kx) * cin;
                        for c in 0..cin {
                            out[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}
