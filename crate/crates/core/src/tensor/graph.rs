use std::cell::{Cell, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::{numel, Result, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<f64>,
    },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Abs(usize),
    SumSquares(usize),
    L2Norm(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of differentiable operations in execution order.
///
/// Nodes are appended as operations run, so inputs always precede outputs and
/// one reverse sweep visits each node exactly once.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
    consumed: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("flops", &self.flops.get())
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if the loss does
    /// not depend on it or it is not tracked.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var<'_>) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.to_vec()))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed as broadcast into `out` (zero on stretched axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Maps every output linear index to the source linear index.
fn broadcast_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out[d] {
                break;
            }
            src -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(shape: &[usize], out: &[usize], g: &[f64]) -> Vec<f64> {
    if shape == out {
        return g.to_vec();
    }
    let mut r = vec![0.0; numel(shape)];
    for (o, &s) in broadcast_map(shape, out).iter().enumerate() {
        r[s] += g[o];
    }
    r
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point operations executed by forward ops so far
    /// (multiply-accumulate counts as two).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn count(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    fn push(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var<'_>> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Adds a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Result<Var<'_>> {
        let track = tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_data());
        self.push("leaf", value, Op::Leaf, track)
    }

    /// Adds a tracked leaf regardless of the tensor's flag.
    pub fn param(&self, tensor: Tensor) -> Result<Var<'_>> {
        self.leaf(tensor.with_requires_grad())
    }

    /// Adds an untracked leaf.
    pub fn constant(&self, tensor: Tensor) -> Result<Var<'_>> {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn value_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call
    /// fails with [`TensorError::TapeConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(loss.graph, self),
            "loss belongs to another graph"
        );
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if numel(loss_shape) != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                for (input, gi) in backward_op(&nodes, id, &g) {
                    if !nodes[input].needs_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, v)| *a += v),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            grads[id] = Some(g);
        }
        // Only tracked nodes report gradients.
        for (slot, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Input gradients of node `id` given its output gradient `g`.
fn backward_op(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let unary = |x: usize, f: &dyn Fn(f64, f64) -> f64| {
        // f(input, output) -> local derivative
        let xv = val(x).data();
        let gi = g
            .iter()
            .zip(xv.iter().zip(out.data()))
            .map(|(&gv, (&xi, &yi))| gv * f(xi, yi))
            .collect();
        vec![(x, gi)]
    };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, reduce_to(val(*a).shape(), out.shape(), g)),
            (*b, reduce_to(val(*b).shape(), out.shape(), g)),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                (*a, reduce_to(val(*a).shape(), out.shape(), g)),
                (*b, reduce_to(val(*b).shape(), out.shape(), &neg)),
            ]
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let am = broadcast_map(av.shape(), out.shape());
            let bm = broadcast_map(bv.shape(), out.shape());
            let is_div = matches!(node.op, Op::Div(..));
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                let (x, y) = (av.data()[am[i]], bv.data()[bm[i]]);
                if is_div {
                    ga[i] = g[i] / y;
                    gb[i] = -g[i] * x / (y * y);
                } else {
                    ga[i] = g[i] * y;
                    gb[i] = g[i] * x;
                }
            }
            vec![
                (*a, reduce_to(av.shape(), out.shape(), &ga)),
                (*b, reduce_to(bv.shape(), out.shape(), &gb)),
            ]
        }
        Op::Neg(x) => vec![(*x, g.iter().map(|v| -v).collect())],
        Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let ga = kernels::matmul(g, &kernels::transpose(bv.data(), k, n), m, n, k);
            let gb = kernels::matmul(&kernels::transpose(av.data(), m, k), g, k, m, n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            vec![(*x, kernels::transpose(g, r, c))]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::BroadcastTo(x) => vec![(*x, reduce_to(val(*x).shape(), out.shape(), g))],
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::SumAxis(x, axis) => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gi[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![(*x, gi)]
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut start = 0;
            inputs
                .iter()
                .map(|&x| {
                    let len = val(x).shape()[*axis];
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gi.extend_from_slice(&g[base..base + len * inner]);
                    }
                    start += len;
                    (x, gi)
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
            let len = out.shape()[*axis];
            let mut gi = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                gi[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, gi)]
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gi[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![(*x, gi)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            inv_std,
        } => {
            let xv = val(*x);
            let d = *xv.shape().last().expect("layer_norm rank >= 1");
            let rows = xv.len() / d;
            let gam = val(*gamma).data();
            let mut gx = vec![0.0; xv.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let xr = &xv.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let inv = inv_std[r];
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] = inv / d as f64 * (d as f64 * dxhat[j] - s1 - xhat[j] * s2);
                    gg[j] += gr[j] * xhat[j];
                    gb[j] += gr[j];
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::Relu(x) => unary(*x, &|xi, _| if xi > 0.0 { 1.0 } else { 0.0 }),
        Op::Gelu(x) => unary(*x, &|xi, _| gelu_grad(xi)),
        Op::Sigmoid(x) => unary(*x, &|_, y| y * (1.0 - y)),
        Op::Tanh(x) => unary(*x, &|_, y| 1.0 - y * y),
        Op::Softplus(x) => unary(*x, &|xi, _| sigmoid(xi)),
        Op::Abs(x) => unary(*x, &|xi, _| {
            if xi > 0.0 {
                1.0
            } else if xi < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::SumSquares(x) => vec![(*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect())],
        Op::L2Norm(x) => {
            let norm = out.item();
            let gi = if norm > 0.0 {
                val(*x).data().iter().map(|v| g[0] * v / norm).collect()
            } else {
                vec![0.0; val(*x).len()]
            };
            vec![(*x, gi)]
        }
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, geom);
            let mut r = vec![(*x, dx), (*w, dw)];
            if let Some(b) = b {
                r.push((*b, db));
            }
            r
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (dx, dw, db) =
                kernels::conv_transpose2d_backward(val(*x).data(), val(*w).data(), g, geom);
            let mut r = vec![(*x, dx), (*w, dw)];
            if let Some(b) = b {
                r.push((*b, db));
            }
            r
        }
        Op::MaxPool2d { x, argmax } => {
            let mut gi = vec![0.0; val(*x).len()];
            for (o, &src) in argmax.iter().enumerate() {
                gi[src] += g[o];
            }
            vec![(*x, gi)]
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_shape(self.id)
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    /// Whether gradients flow into this node.
    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    /// Copy of the current value.
    pub fn tensor(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.data().to_vec()
    }

    /// Runs `f` on the value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.data()[0]
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn tracked(ids: &[usize], nodes: &[Node]) -> bool {
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(
        self,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
        cost: usize,
    ) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let data = x.value.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::from_parts(x.value.shape().to_vec(), data),
                x.needs_grad,
            )
        };
        self.graph.count(value.len() * cost);
        self.graph.push(name, value, op, needs)
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| mismatch(name, a.shape(), b.shape()))?;
            let data: Vec<f64> = if a.shape() == b.shape() {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            } else {
                let am = broadcast_map(a.shape(), &shape);
                let bm = broadcast_map(b.shape(), &shape);
                am.iter()
                    .zip(&bm)
                    .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                    .collect()
            };
            (
                Tensor::from_parts(shape, data),
                Self::tracked(&[self.id, other.id], &nodes),
            )
        };
        self.graph.count(value.len());
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            "mul" => Op::Mul(self.id, other.id),
            _ => Op::Div(self.id, other.id),
        };
        self.graph.push(name, value, op, needs)
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary("neg", Op::Neg(self.id), |v| -v, 1)
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.unary("scale", Op::Scale(self.id, s), |v| v * s, 1)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |v| v + s, 1)
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            self.graph.count(2 * m * k * n);
            (
                Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n)),
                Self::tracked(&[self.id, other.id], &nodes),
            )
        };
        self.graph
            .push("matmul", value, Op::MatMul(self.id, other.id), needs)
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            if x.value.rank() != 2 {
                return Err(TensorError::InvalidAxis {
                    op: "transpose",
                    axis: 1,
                    shape: x.value.shape().to_vec(),
                });
            }
            let (r, c) = (x.value.shape()[0], x.value.shape()[1]);
            (
                Tensor::from_parts(vec![c, r], kernels::transpose(x.value.data(), r, c)),
                x.needs_grad,
            )
        };
        self.graph
            .push("transpose", value, Op::Transpose(self.id), needs)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            (x.value.reshape(shape)?, x.needs_grad)
        };
        self.graph
            .push("reshape", value, Op::Reshape(self.id), needs)
    }

    /// Broadcasts to `shape` (right-aligned, size-1 axes stretch).
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let ok = broadcast_shape(x.value.shape(), shape).is_some_and(|s| s == shape);
            if !ok {
                return Err(mismatch("broadcast_to", x.value.shape(), shape));
            }
            let data = broadcast_map(x.value.shape(), shape)
                .into_iter()
                .map(|i| x.value.data()[i])
                .collect();
            (Tensor::from_parts(shape.to_vec(), data), x.needs_grad)
        };
        self.graph
            .push("broadcast_to", value, Op::BroadcastTo(self.id), needs)
    }

    /// Sum of all elements (scalar result).
    pub fn sum(self) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            (
                Tensor::from_parts(vec![], vec![x.value.data().iter().sum()]),
                x.needs_grad,
            )
        };
        self.graph.count(self.numel());
        self.graph.push("sum", value, Op::Sum(self.id), needs)
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op, axis, shape });
        }
        Ok(shape)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x.value.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            (Tensor::from_parts(s, data), x.needs_grad)
        };
        self.graph
            .push("sum_axis", value, Op::SumAxis(self.id, axis), needs)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let len = self.check_axis("mean_axis", axis)?[axis];
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let graph = first.graph;
        let base = first.check_axis("concat", axis)?;
        let (value, needs) = {
            let nodes = graph.nodes.borrow();
            let mut total = 0;
            for p in parts {
                first.same_graph(p);
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
            let needs = Self::tracked(&ids, &nodes);
            (Tensor::from_parts(shape, data), needs)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        graph.push("concat", value, Op::Concat(ids, axis), needs)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let shape = self.check_axis("slice", axis)?;
        if start >= end || end > shape[axis] {
            return Err(TensorError::Geometry {
                op: "slice",
                detail: format!("range {start}..{end} invalid for extent {}", shape[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let len = end - start;
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * full + start) * inner;
                data.extend_from_slice(&x.value.data()[src..src + len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            (Tensor::from_parts(s, data), x.needs_grad)
        };
        self.graph.push(
            "slice",
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            needs,
        )
    }

    /// Rows `start..end` of the leading axis.
    pub fn rows(self, start: usize, end: usize) -> Result<Var<'g>> {
        self.slice(0, start, end)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let xv = x.value.data();
            let mut data = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len)
                        .map(|l| xv[at(l)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (xv[at(l)] - max).exp();
                        data[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        data[at(l)] /= z;
                    }
                }
            }
            (Tensor::from_parts(shape.clone(), data), x.needs_grad)
        };
        self.graph.count(3 * value.len());
        self.graph
            .push("softmax", value, Op::Softmax(self.id, axis), needs)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (value, inv_std, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let d = *x
                .shape()
                .last()
                .ok_or_else(|| mismatch("layer_norm", x.shape(), gv.shape()))?;
            if gv.shape() != [d] {
                return Err(mismatch("layer_norm", x.shape(), gv.shape()));
            }
            if bv.shape() != [d] {
                return Err(mismatch("layer_norm", x.shape(), bv.shape()));
            }
            let rows = x.len() / d;
            let mut data = vec![0.0; x.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    data[r * d + j] = (xr[j] - mean) * inv * gv.data()[j] + bv.data()[j];
                }
                inv_std.push(inv);
            }
            let needs = Self::tracked(&[self.id, gamma.id, beta.id], &nodes);
            (Tensor::from_parts(x.shape().to_vec(), data), inv_std, needs)
        };
        self.graph.count(8 * value.len());
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            inv_std,
        };
        self.graph.push("layer_norm", value, op, needs)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0), 1)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary("gelu", Op::Gelu(self.id), gelu, 8)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid, 4)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh, 4)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary("softplus", Op::Softplus(self.id), softplus, 4)
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary("abs", Op::Abs(self.id), f64::abs, 1)
    }

    /// Sum of absolute values (scalar).
    pub fn l1_sum(self) -> Result<Var<'g>> {
        self.abs()?.sum()
    }

    /// Sum of squares (scalar).
    pub fn sum_squares(self) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let s = x.value.data().iter().map(|v| v * v).sum();
            (Tensor::from_parts(vec![], vec![s]), x.needs_grad)
        };
        self.graph.count(2 * self.numel());
        self.graph
            .push("sum_squares", value, Op::SumSquares(self.id), needs)
    }

    /// Euclidean (Frobenius) norm of all elements; its gradient at zero is
    /// taken as zero.
    pub fn l2_norm(self) -> Result<Var<'g>> {
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let s: f64 = x.value.data().iter().map(|v| v * v).sum();
            (Tensor::from_parts(vec![], vec![s.sqrt()]), x.needs_grad)
        };
        self.graph.count(2 * self.numel());
        self.graph
            .push("l2_norm", value, Op::L2Norm(self.id), needs)
    }

    fn conv_geometry(
        op: &'static str,
        x: &[usize],
        w: &[usize],
        transposed: bool,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeometry> {
        if x.len() != 3 || w.len() != 4 {
            return Err(mismatch(op, x, w));
        }
        let (cin, cout) = if transposed {
            (w[0], w[1])
        } else {
            (w[1], w[0])
        };
        if x[0] != cin {
            return Err(mismatch(op, x, w));
        }
        let g = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            in_h: x[1],
            in_w: x[2],
            kernel_h: w[2],
            kernel_w: w[3],
            stride,
            padding,
        };
        let ok = if transposed {
            g.transposed_out()
        } else {
            g.conv_out()
        };
        if ok.is_none() {
            return Err(TensorError::Geometry {
                op,
                detail: format!("input {x:?}, kernel {w:?}, stride {stride}, padding {padding}"),
            });
        }
        Ok(g)
    }

    fn check_bias(op: &'static str, b: Option<&Tensor>, channels: usize) -> Result<()> {
        match b {
            Some(b) if b.shape() != [channels] => Err(mismatch(op, b.shape(), &[channels])),
            _ => Ok(()),
        }
    }

    /// Cross-correlation of a `C×H×W` map with `O×C×kh×kw` kernels.
    pub fn conv2d(
        self,
        w: Var<'g>,
        b: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(&w);
        let (value, geom, needs) = {
            let nodes = self.graph.nodes.borrow();
            let (x, wv) = (&nodes[self.id].value, &nodes[w.id].value);
            let geom =
                Self::conv_geometry("conv2d", x.shape(), wv.shape(), false, stride, padding)?;
            let bv = b.map(|b| &nodes[b.id].value);
            Self::check_bias("conv2d", bv, geom.out_channels)?;
            let (oh, ow) = geom.conv_out().expect("validated");
            let data = kernels::conv2d_im2col(x.data(), wv.data(), bv.map(|t| t.data()), &geom);
            self.graph.count(
                2 * geom.out_channels * oh * ow * geom.in_channels * geom.kernel_h * geom.kernel_w,
            );
            let mut ids = vec![self.id, w.id];
            ids.extend(b.map(|b| b.id));
            (
                Tensor::from_parts(vec![geom.out_channels, oh, ow], data),
                geom,
                Self::tracked(&ids, &nodes),
            )
        };
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
        };
        self.graph.push("conv2d", value, op, needs)
    }

    /// Transposed convolution of a `C_in×H×W` map with `C_in×C_out×kh×kw`
    /// kernels; output extent `(H−1)·stride − 2·padding + kh`.
    pub fn conv_transpose2d(
        self,
        w: Var<'g>,
        b: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(&w);
        let (value, geom, needs) = {
            let nodes = self.graph.nodes.borrow();
            let (x, wv) = (&nodes[self.id].value, &nodes[w.id].value);
            let geom = Self::conv_geometry(
                "conv_transpose2d",
                x.shape(),
                wv.shape(),
                true,
                stride,
                padding,
            )?;
            let bv = b.map(|b| &nodes[b.id].value);
            Self::check_bias("conv_transpose2d", bv, geom.out_channels)?;
            let (oh, ow) = geom.transposed_out().expect("validated");
            let data =
                kernels::conv_transpose2d_col2im(x.data(), wv.data(), bv.map(|t| t.data()), &geom);
            self.graph.count(
                2 * geom.in_channels
                    * geom.in_h
                    * geom.in_w
                    * geom.out_channels
                    * geom.kernel_h
                    * geom.kernel_w,
            );
            let mut ids = vec![self.id, w.id];
            ids.extend(b.map(|b| b.id));
            (
                Tensor::from_parts(vec![geom.out_channels, oh, ow], data),
                geom,
                Self::tracked(&ids, &nodes),
            )
        };
        let op = Op::ConvTranspose2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
        };
        self.graph.push("conv_transpose2d", value, op, needs)
    }

    /// Non-overlapping-or-strided max pooling of a `C×H×W` map; ties go to
    /// the first window element in row-major order.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 3 || kernel == 0 || stride == 0 || shape[1] < kernel || shape[2] < kernel
        {
            return Err(TensorError::Geometry {
                op: "max_pool2d",
                detail: format!("input {shape:?}, kernel {kernel}, stride {stride}"),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let (value, argmax, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let xv = x.value.data();
            let mut data = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (f64::NEG_INFINITY, 0);
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                if xv[i] > best.0 {
                                    best = (xv[i], i);
                                }
                            }
                        }
                        data.push(best.0);
                        argmax.push(best.1);
                    }
                }
            }
            (
                Tensor::from_parts(vec![c, oh, ow], data),
                argmax,
                x.needs_grad,
            )
        };
        self.graph.count(value.len() * kernel * kernel);
        self.graph.push(
            "max_pool2d",
            value,
            Op::MaxPool2d { x: self.id, argmax },
            needs,
        )
    }

    /// `x·w + b` for `x: T×in`, `w: in×out`, `b: out`.
    pub fn affine(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.matmul(w)?.add(b)
    }
}
