use std::f64::consts::LN_10;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Index of a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sum,
    Mean,
    Square,
    Sqrt,
    Log10,
    Relu,
    Sigmoid,
    Tanh,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Scale(f64),
    Dot,
    ClampMin(f64),
    /// Row-major reinterpretation as a `rows x cols` matrix.
    Reshape { rows: usize, cols: usize },
    Flatten,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log10 => "log10",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Scale(_) => "scale",
            Op::Dot => "dot",
            Op::ClampMin(_) => "clamp_min",
            Op::Reshape { .. } => "reshape",
            Op::Flatten => "flatten",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::Dot => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    op: Option<Op>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// How an operand of a binary op maps onto the output index space.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Full,
    Scalar,
    Row(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
        }
    }
}

fn broadcast(op: Op, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Full));
    }
    if b.numel() == 1 {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Scalar));
    }
    if a.numel() == 1 {
        return Ok((b.shape().to_vec(), Bcast::Scalar, Bcast::Full));
    }
    if b.rank() == 1 && a.rank() >= 2 && a.shape().last() == Some(&b.numel()) {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Row(b.numel())));
    }
    if a.rank() == 1 && b.rank() >= 2 && b.shape().last() == Some(&a.numel()) {
        return Ok((b.shape().to_vec(), Bcast::Row(a.numel()), Bcast::Full));
    }
    Err(Error::shape(op.name(), format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Append-only reverse-mode tape. Forward values are computed eagerly.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: None, inputs: Vec::new(), value, requires_grad });
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Appends `op` applied to `inputs` and evaluates it.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::shape(op.name(), format!("expected {} inputs, got {}", n, inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(op.name(), "needs at least one input"));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::shape(op.name(), format!("unknown input node {}", bad.0)));
        }
        let value = self.forward(op, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Some(op), inputs: inputs.to_vec(), value, requires_grad });
        Ok(id)
    }

    fn forward(&self, op: Op, inputs: &[NodeId]) -> Result<Tensor> {
        let x = &self.nodes[inputs[0].0].value;
        let unary = |f: &dyn Fn(f64) -> f64| Ok(x.map(f));
        match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let y = &self.nodes[inputs[1].0].value;
                let (shape, ba, bb) = broadcast(op, x, y)?;
                let numel: usize = shape.iter().product();
                let (xd, yd) = (x.data(), y.data());
                let data: Vec<f64> = (0..numel)
                    .map(|i| {
                        let (u, v) = (xd[ba.index(i)], yd[bb.index(i)]);
                        match op {
                            Op::Add => u + v,
                            Op::Sub => u - v,
                            Op::Mul => u * v,
                            _ => u / v,
                        }
                    })
                    .collect();
                Tensor::new(shape, data)
            }
            Op::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                let (m, k, n) = match (x.shape(), y.shape()) {
                    ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                    (a, b) => return Err(Error::shape("matmul", format!("{:?} x {:?}", a, b))),
                };
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, x.data(), false, y.data(), false, &mut out, false);
                Tensor::new(vec![m, n], out)
            }
            Op::Dot => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape() != y.shape() {
                    return Err(Error::shape("dot", format!("{:?} . {:?}", x.shape(), y.shape())));
                }
                Ok(Tensor::scalar(x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()))
            }
            Op::Sum => Ok(Tensor::scalar(x.data().iter().sum())),
            Op::Mean => {
                if x.numel() == 0 {
                    return Err(Error::shape("mean", "empty tensor"));
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
            }
            Op::Square => unary(&|v| v * v),
            Op::Sqrt => unary(&f64::sqrt),
            Op::Log10 => unary(&f64::log10),
            Op::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
            Op::Sigmoid => unary(&sigmoid),
            Op::Tanh => unary(&f64::tanh),
            Op::Scale(c) => unary(&|v| c * v),
            Op::ClampMin(t) => unary(&|v| if v > t { v } else { t }),
            Op::Reshape { rows, cols } => x.clone().reshape(vec![rows, cols]),
            Op::Flatten => x.clone().reshape(vec![x.numel()]),
            Op::Slice { axis, start, end } => {
                if axis >= x.rank() || start > end || end > x.shape()[axis] {
                    return Err(Error::shape(
                        "slice",
                        format!("axis {} range {}..{} on {:?}", axis, start, end, x.shape()),
                    ));
                }
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let width = (end - start) * inner;
                let mut data = Vec::with_capacity(outer * width);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    data.extend_from_slice(&x.data()[base..base + width]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = end - start;
                Tensor::new(shape, data)
            }
            Op::Concat { axis } => {
                let first = x.shape();
                if axis >= first.len() {
                    return Err(Error::shape("concat", format!("axis {} on {:?}", axis, first)));
                }
                let mut total = 0;
                for id in inputs {
                    let s = self.nodes[id.0].value.shape();
                    let compatible = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                    if !compatible {
                        return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", first, s, axis)));
                    }
                    total += s[axis];
                }
                let (outer, _, inner) = axis_split(first, axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for id in inputs {
                        let t = &self.nodes[id.0].value;
                        let width = t.shape()[axis] * inner;
                        data.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
                    }
                }
                let mut shape = first.to_vec();
                shape[axis] = total;
                Tensor::new(shape, data)
            }
        }
    }

    /// Reverse sweep from a scalar `loss`; gradients replace those of any earlier sweep.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let (Some(op), true) = (node.op, node.requires_grad) {
                self.propagate(op, i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, op: Op, index: usize, g: &Tensor) {
        let Graph { nodes, grads } = self;
        let node = &nodes[index];
        let inputs = &node.inputs;
        let out = &node.value;
        let wants = |k: usize| nodes[inputs[k].0].requires_grad;
        macro_rules! grad_of {
            ($k:expr) => {
                grad_slot(grads, nodes, inputs[$k].0)
            };
        }
        let x = &nodes[inputs[0].0].value;
        let gd = g.data();
        match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let y = &nodes[inputs[1].0].value;
                let (_, ba, bb) = broadcast(op, x, y).expect("shapes validated in forward");
                let (xd, yd) = (x.data(), y.data());
                if wants(0) {
                    let ga = grad_of!(0);
                    for (i, &gi) in gd.iter().enumerate() {
                        let d = match op {
                            Op::Add | Op::Sub => gi,
                            Op::Mul => gi * yd[bb.index(i)],
                            _ => gi / yd[bb.index(i)],
                        };
                        ga[ba.index(i)] += d;
                    }
                }
                if wants(1) {
                    let gb = grad_of!(1);
                    for (i, &gi) in gd.iter().enumerate() {
                        let d = match op {
                            Op::Add => gi,
                            Op::Sub => -gi,
                            Op::Mul => gi * xd[ba.index(i)],
                            _ => {
                                let v = yd[bb.index(i)];
                                -gi * xd[ba.index(i)] / (v * v)
                            }
                        };
                        gb[bb.index(i)] += d;
                    }
                }
            }
            Op::MatMul => {
                let y = &nodes[inputs[1].0].value;
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[1];
                if wants(0) {
                    let ga = grad_of!(0);
                    gemm(m, n, k, gd, false, y.data(), true, ga, true);
                }
                if wants(1) {
                    let gb = grad_of!(1);
                    gemm(k, m, n, x.data(), true, gd, false, gb, true);
                }
            }
            Op::Dot => {
                let y = &nodes[inputs[1].0].value;
                let s = gd[0];
                if wants(0) {
                    let ga = grad_of!(0);
                    ga.iter_mut().zip(y.data()).for_each(|(a, v)| *a += s * v);
                }
                if wants(1) {
                    let gb = grad_of!(1);
                    gb.iter_mut().zip(x.data()).for_each(|(b, v)| *b += s * v);
                }
            }
            Op::Sum | Op::Mean => {
                if wants(0) {
                    let s = if op == Op::Mean { gd[0] / x.numel() as f64 } else { gd[0] };
                    grad_of!(0).iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Reshape { .. } | Op::Flatten => {
                if wants(0) {
                    grad_of!(0).iter_mut().zip(gd).for_each(|(a, v)| *a += v);
                }
            }
            Op::Slice { axis, start, end } => {
                if wants(0) {
                    let (outer, len, inner) = axis_split(x.shape(), axis);
                    let width = (end - start) * inner;
                    let ga = grad_of!(0);
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        ga[base..base + width]
                            .iter_mut()
                            .zip(&gd[o * width..(o + 1) * width])
                            .for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = axis_split(out.shape(), axis);
                let mut offset = 0;
                for k in 0..inputs.len() {
                    let w = nodes[inputs[k].0].value.shape()[axis] * inner;
                    if wants(k) {
                        let gk = grad_of!(k);
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            gk[o * w..(o + 1) * w].iter_mut().zip(&gd[src..src + w]).for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += w;
                }
            }
            _ => {
                if !wants(0) {
                    return;
                }
                let (xd, yd) = (x.data(), out.data());
                let ga = grad_of!(0);
                for i in 0..gd.len() {
                    let d = match op {
                        Op::Square => 2.0 * xd[i],
                        Op::Sqrt => 0.5 / yd[i],
                        Op::Log10 => 1.0 / (xd[i] * LN_10),
                        Op::Relu => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Sigmoid => yd[i] * (1.0 - yd[i]),
                        Op::Tanh => 1.0 - yd[i] * yd[i],
                        Op::Scale(c) => c,
                        Op::ClampMin(t) => {
                            if xd[i] > t {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!("binary and structural ops handled above"),
                    };
                    ga[i] += gd[i] * d;
                }
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Dot, &[a, b])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn log10(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log10, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn clamp_min(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        self.apply(Op::ClampMin(threshold), &[a])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, inputs)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.apply(Op::Reshape { rows, cols }, &[a])
    }

    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Flatten, &[a])
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar_constant(c)?;
        self.add(a, k)
    }

    /// Sum of squares, `‖a‖²`.
    pub fn energy(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        self.sum(sq)
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], id: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())).data_mut()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
