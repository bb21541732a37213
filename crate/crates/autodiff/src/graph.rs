use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{AutogradError, Result};
use crate::tensor::{Shape, Tensor};

/// Position of a node in its [`Graph`]. Insertion order is a topological order.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    SafeRecip(NodeId),
    Softplus { x: NodeId, tau: f64 },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SumRows(NodeId),
    SumCols(NodeId),
    Broadcast(NodeId),
    MaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice { x: NodeId, row0: usize, col0: usize },
    Pad { x: NodeId, row0: usize, col0: usize },
    GatherRows { x: NodeId, index: Rc<[usize]> },
    ScatterRows { x: NodeId, index: Rc<[usize]> },
    GradReverse { x: NodeId, lambda: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Affine { x, .. }
            | Softplus { x, .. }
            | Clamp { x, .. }
            | Slice { x, .. }
            | Pad { x, .. }
            | GatherRows { x, .. }
            | ScatterRows { x, .. }
            | GradReverse { x, .. } => vec![*x],
            Transpose(x) | Relu(x) | Sigmoid(x) | Tanh(x) | Exp(x) | Log(x) | Sqrt(x)
            | SafeRecip(x) | SumRows(x) | SumCols(x) | Broadcast(x) | MaxRows(x) => vec![*x],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
///
/// Single-threaded by construction (`!Sync`); independent records may live on
/// different threads.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
    warnings: RefCell<Vec<String>>,
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
            .field("grad_enabled", &self.grad_enabled.get())
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Graph::gradient`], aligned with the `wrt` slice.
#[derive(Debug)]
pub struct Gradients<'g> {
    pub grads: Vec<Var<'g>>,
    /// Positions in `wrt` that the output does not depend on. Their entry in
    /// `grads` is an explicit zero tensor.
    pub unreachable: Vec<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
            warnings: RefCell::new(Vec::new()),
        }
    }

    /// A leaf that participates in differentiation.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.clone(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Turns recording of differentiable nodes on or off; returns the previous
    /// setting. Values are still computed when off.
    pub fn set_grad_enabled(&self, on: bool) -> bool {
        self.grad_enabled.replace(on)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn warn(&self, msg: impl Into<String>) {
        self.warnings.borrow_mut().push(msg.into());
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        let requires_grad =
            self.grad_enabled.get() && op.inputs().iter().any(|&i| self.requires(i));
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Smallest distance, over all differentiable nodes, between an input and
    /// a point where the op is not differentiable (relu at 0, clamp bounds,
    /// max-reduce ties, reciprocal at 0). Finite-difference checks are only
    /// meaningful when this comfortably exceeds the perturbation size.
    pub fn kink_distance(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut best = f64::INFINITY;
        for node in nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(x) | Op::SafeRecip(x) => {
                    for v in nodes[*x].value.data() {
                        best = best.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in nodes[*x].value.data() {
                        best = best.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::MaxRows(x) => {
                    let t = &nodes[*x].value;
                    if t.rows() < 2 {
                        continue;
                    }
                    for c in 0..t.cols() {
                        let mut col: Vec<f64> = (0..t.rows()).map(|r| t.get(r, c)).collect();
                        col.sort_by(|a, b| b.total_cmp(a));
                        best = best.min(col[0] - col[1]);
                    }
                }
                _ => {}
            }
        }
        best
    }

    /// Derivatives of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` set the backward computation is recorded, so the
    /// returned gradients are differentiable functions of the inputs. Without
    /// it they are constants. Both modes run the same arithmetic.
    pub fn gradient<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Gradients<'g>> {
        self.check_owner(output)?;
        for w in wrt {
            self.check_owner(*w)?;
        }
        let shape = output.shape();
        if shape != [1, 1] {
            return Err(AutogradError::NonScalarOutput { shape });
        }

        let n = output.id + 1;
        let mut is_target = vec![false; n];
        for w in wrt {
            if w.id < n {
                is_target[w.id] = true;
            }
        }
        // reaches[i]: node i is (or depends on) one of the targets
        let mut reaches = is_target.clone();
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !reaches[i] && nodes[i].requires_grad {
                    reaches[i] = nodes[i].op.inputs().iter().any(|&j| reaches[j]);
                }
            }
        }

        let prev = self.set_grad_enabled(create_graph);
        let result = self.backward(output, n, &reaches);
        self.set_grad_enabled(prev);
        let grads = result?;

        let mut out = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for (k, w) in wrt.iter().enumerate() {
            match grads.get(w.id).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    unreachable.push(k);
                    self.warn(format!(
                        "gradient: node {} does not influence the output",
                        w.id
                    ));
                    out.push(self.constant(Tensor::zeros(w.shape())));
                }
            }
        }
        Ok(Gradients {
            grads: out,
            unreachable,
        })
    }

    fn backward<'g>(
        &'g self,
        output: Var<'g>,
        n: usize,
        reaches: &[bool],
    ) -> Result<Vec<Option<Var<'g>>>> {
        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        if !reaches[output.id] {
            return Ok(grads);
        }
        grads[output.id] = Some(self.constant(Tensor::scalar(1.0)));
        for i in (0..n).rev() {
            if !reaches[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            for (j, gj) in self.backward_rule(i, &op, g, reaches)? {
                grads[j] = Some(match grads[j] {
                    Some(acc) => acc.add(gj)?,
                    None => gj,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian product of one node, expressed with recorded ops so it
    /// is itself differentiable.
    fn backward_rule<'g>(
        &'g self,
        id: NodeId,
        op: &Op,
        g: Var<'g>,
        need: &[bool],
    ) -> Result<Vec<(NodeId, Var<'g>)>> {
        let var = |i: NodeId| Var { graph: self, id: i };
        let out = var(id);
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need[*a] {
                    res.push((*a, sum_to(g, var(*a).shape())?));
                }
                if need[*b] {
                    res.push((*b, sum_to(g, var(*b).shape())?));
                }
            }
            Op::Sub(a, b) => {
                if need[*a] {
                    res.push((*a, sum_to(g, var(*a).shape())?));
                }
                if need[*b] {
                    res.push((*b, sum_to(g.neg()?, var(*b).shape())?));
                }
            }
            Op::Mul(a, b) => {
                if need[*a] {
                    res.push((*a, sum_to(g.mul(var(*b))?, var(*a).shape())?));
                }
                if need[*b] {
                    res.push((*b, sum_to(g.mul(var(*a))?, var(*b).shape())?));
                }
            }
            Op::Div(a, b) => {
                if need[*a] {
                    res.push((*a, sum_to(g.div(var(*b))?, var(*a).shape())?));
                }
                if need[*b] {
                    let gb = g.mul(out)?.div(var(*b))?.neg()?;
                    res.push((*b, sum_to(gb, var(*b).shape())?));
                }
            }
            Op::Affine { x, scale } => res.push((*x, g.scale(*scale)?)),
            Op::MatMul(a, b) => {
                if need[*a] {
                    res.push((*a, g.matmul(var(*b).t()?)?));
                }
                if need[*b] {
                    res.push((*b, var(*a).t()?.matmul(g)?));
                }
            }
            Op::Transpose(x) => res.push((*x, g.t()?)),
            Op::Relu(x) => {
                let mask = var(*x).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                res.push((*x, g.mul(self.constant(mask))?));
            }
            Op::Sigmoid(x) => {
                let d = out.mul(out.affine(-1.0, 1.0)?)?;
                res.push((*x, g.mul(d)?));
            }
            Op::Tanh(x) => {
                let d = out.mul(out)?.affine(-1.0, 1.0)?;
                res.push((*x, g.mul(d)?));
            }
            Op::Exp(x) => res.push((*x, g.mul(out)?)),
            Op::Log(x) => res.push((*x, g.div(var(*x))?)),
            Op::Sqrt(x) => res.push((*x, g.mul(out.safe_recip()?)?.scale(0.5)?)),
            Op::SafeRecip(x) => res.push((*x, g.mul(out)?.mul(out)?.neg()?)),
            Op::Softplus { x, tau } => {
                let d = var(*x).scale(1.0 / tau)?.sigmoid()?;
                res.push((*x, g.mul(d)?));
            }
            Op::Clamp { x, lo, hi } => {
                let mask = var(*x)
                    .value()
                    .map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                res.push((*x, g.mul(self.constant(mask))?));
            }
            Op::SumRows(x) | Op::SumCols(x) => {
                res.push((*x, g.broadcast_to(var(*x).shape())?));
            }
            Op::Broadcast(x) => res.push((*x, sum_to(g, var(*x).shape())?)),
            Op::MaxRows(x) => {
                let input = var(*x).value();
                let mut mask = Tensor::zeros(input.shape());
                for c in 0..input.cols() {
                    let mut best = 0;
                    for r in 1..input.rows() {
                        if input.get(r, c) > input.get(best, c) {
                            best = r;
                        }
                    }
                    mask.set(best, c, 1.0);
                }
                let spread = g.broadcast_to(input.shape())?;
                res.push((*x, spread.mul(self.constant(mask))?));
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let mut off = 0;
                for p in parts {
                    let c = var(*p).shape()[1];
                    if need[*p] {
                        res.push((*p, g.slice(0..rows, off..off + c)?));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.shape()[1];
                let mut off = 0;
                for p in parts {
                    let r = var(*p).shape()[0];
                    if need[*p] {
                        res.push((*p, g.slice(off..off + r, 0..cols)?));
                    }
                    off += r;
                }
            }
            Op::Slice { x, row0, col0 } => {
                res.push((*x, g.pad(var(*x).shape(), *row0, *col0)?));
            }
            Op::Pad { x, row0, col0 } => {
                let [r, c] = var(*x).shape();
                res.push((*x, g.slice(*row0..row0 + r, *col0..col0 + c)?));
            }
            Op::GatherRows { x, index } => {
                let rows = var(*x).shape()[0];
                res.push((*x, g.scatter_rows(index, rows)?));
            }
            Op::ScatterRows { x, index } => res.push((*x, g.gather_rows(index)?)),
            Op::GradReverse { x, lambda } => res.push((*x, g.scale(-lambda)?)),
        }
        Ok(res)
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(AutogradError::ForeignVar)
        }
    }
}

fn sum_to<'g>(g: Var<'g>, shape: Shape) -> Result<Var<'g>> {
    let mut g = g;
    let gs = g.shape();
    if shape[0] == 1 && gs[0] != 1 {
        g = g.sum_rows()?;
    }
    if shape[1] == 1 && gs[1] != 1 {
        g = g.sum_cols()?;
    }
    Ok(g)
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 2];
    for k in 0..2 {
        out[k] = if a[k] == b[k] {
            a[k]
        } else if a[k] == 1 {
            b[k]
        } else if b[k] == 1 {
            a[k]
        } else {
            return Err(AutogradError::ShapeMismatch { op, lhs: a, rhs: b });
        };
    }
    Ok(out)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(out, data).expect("shape checked");
    }
    let [ar, ac] = a.shape();
    let [br, bc] = b.shape();
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for i in 0..out[0] {
        for j in 0..out[1] {
            let x = a.get(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j });
            let y = b.get(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
            data.push(f(x, y));
        }
    }
    Tensor::new(out, data).expect("shape checked")
}

fn stable_softplus(z: f64, tau: f64) -> f64 {
    let u = z / tau;
    if u > 30.0 {
        z
    } else if u < -30.0 {
        tau * u.exp()
    } else {
        tau * (u.max(0.0) + (-u.abs()).exp().ln_1p())
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// The scalar value of a `[1, 1]` variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// A constant copy, cut off from differentiation.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn same_graph(&self, other: Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(AutogradError::ForeignVar)
        }
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        self.graph.push(name, zip_broadcast(&a, &b, shape, f), op)
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let v = self.value().map(f);
        self.graph.push(name, v, op)
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "subtract", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "multiply", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "divide", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Result<Var<'g>> {
        self.unary("affine", Op::Affine { x: self.id, scale }, |v| {
            scale * v + shift
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.affine(1.0, c)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.affine(-1.0, 0.0)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let v = self.value().matmul(&other.value())?;
        self.graph.push("matmul", v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'g>> {
        let v = self.value().transpose();
        self.graph.push("transpose", v, Op::Transpose(self.id))
    }

    /// Rectifier; the subgradient at exactly 0 is 0.
    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    /// `1 / x`, defined as 0 where `x == 0`.
    pub fn safe_recip(self) -> Result<Var<'g>> {
        self.unary("safe_recip", Op::SafeRecip(self.id), |v| {
            if v == 0.0 {
                0.0
            } else {
                1.0 / v
            }
        })
    }

    /// `tau * ln(1 + exp(x / tau))`, a smooth upper bound of `max(0, x)` that
    /// is within `tau * ln 2` of it everywhere.
    pub fn softplus(self, tau: f64) -> Result<Var<'g>> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(AutogradError::InvalidArgument {
                op: "softplus",
                reason: format!("temperature must be positive, got {tau}"),
            });
        }
        self.unary("softplus", Op::Softplus { x: self.id, tau }, |v| {
            stable_softplus(v, tau)
        })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary("clamp", Op::Clamp { x: self.id, lo, hi }, |v| {
            v.max(lo).min(hi)
        })
    }

    /// Column sums: `[n, m] -> [1, m]`.
    pub fn sum_rows(self) -> Result<Var<'g>> {
        let x = self.value();
        let [r, c] = x.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        self.graph
            .push("sum_rows", Tensor::new([1, c], out)?, Op::SumRows(self.id))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(self) -> Result<Var<'g>> {
        let x = self.value();
        let r = x.rows();
        let out = (0..r).map(|i| x.row_slice(i).iter().sum()).collect();
        self.graph
            .push("sum_cols", Tensor::new([r, 1], out)?, Op::SumCols(self.id))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.sum_rows()?.sum_cols()
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().len();
        if n == 0 {
            return Err(AutogradError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Replicates rows and/or columns of extent 1 up to `shape`.
    pub fn broadcast_to(self, shape: Shape) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape() == shape {
            return Ok(self);
        }
        let s = broadcast_shape("broadcast", x.shape(), shape)?;
        if s != shape {
            return Err(AutogradError::ShapeMismatch {
                op: "broadcast",
                lhs: x.shape(),
                rhs: shape,
            });
        }
        let v = zip_broadcast(&x, &Tensor::zeros(shape), shape, |a, _| a);
        self.graph.push("broadcast", v, Op::Broadcast(self.id))
    }

    /// Column-wise maximum over rows: `[n, m] -> [1, m]`.
    pub fn max_rows(self) -> Result<Var<'g>> {
        let x = self.value();
        let [r, c] = x.shape();
        if r == 0 {
            return Err(AutogradError::InvalidArgument {
                op: "max_rows",
                reason: "no rows".into(),
            });
        }
        let out = (0..c)
            .map(|j| {
                (0..r)
                    .map(|i| x.get(i, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        self.graph
            .push("max_rows", Tensor::new([1, c], out)?, Op::MaxRows(self.id))
    }

    /// Concatenates along the column axis.
    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(AutogradError::InvalidArgument {
            op: "concat",
            reason: "nothing to concatenate".into(),
        })?;
        let rows = first.shape()[0];
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(*p)?;
            if v.rows() != rows {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: v.shape(),
                });
            }
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let op = Op::ConcatCols(parts.iter().map(|p| p.id).collect());
        first
            .graph
            .push("concat", Tensor::new([rows, cols], data)?, op)
    }

    /// Concatenates along the row axis.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(AutogradError::InvalidArgument {
            op: "concat_rows",
            reason: "nothing to concatenate".into(),
        })?;
        let cols = first.shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_graph(*p)?;
            let v = p.value();
            if v.cols() != cols {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let op = Op::ConcatRows(parts.iter().map(|p| p.id).collect());
        first
            .graph
            .push("concat_rows", Tensor::new([rows, cols], data)?, op)
    }

    pub fn slice(self, rows: Range<usize>, cols: Range<usize>) -> Result<Var<'g>> {
        let x = self.value();
        if rows.end > x.rows()
            || cols.end > x.cols()
            || rows.start > rows.end
            || cols.start > cols.end
        {
            return Err(AutogradError::InvalidArgument {
                op: "slice",
                reason: format!("range {rows:?} x {cols:?} outside {:?}", x.shape()),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&x.row_slice(i)[cols.clone()]);
        }
        let op = Op::Slice {
            x: self.id,
            row0: rows.start,
            col0: cols.start,
        };
        self.graph
            .push("slice", Tensor::new([rows.len(), cols.len()], data)?, op)
    }

    /// Places `self` inside a zero matrix of `shape` at `(row0, col0)`.
    pub fn pad(self, shape: Shape, row0: usize, col0: usize) -> Result<Var<'g>> {
        let x = self.value();
        let [r, c] = x.shape();
        if row0 + r > shape[0] || col0 + c > shape[1] {
            return Err(AutogradError::ShapeMismatch {
                op: "pad",
                lhs: x.shape(),
                rhs: shape,
            });
        }
        let mut out = Tensor::zeros(shape);
        for i in 0..r {
            for j in 0..c {
                out.set(row0 + i, col0 + j, x.get(i, j));
            }
        }
        self.graph.push(
            "pad",
            out,
            Op::Pad {
                x: self.id,
                row0,
                col0,
            },
        )
    }

    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let mut data = Vec::with_capacity(index.len() * x.cols());
        for &i in index {
            if i >= x.rows() {
                return Err(AutogradError::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("row {i} out of {}", x.rows()),
                });
            }
            data.extend_from_slice(x.row_slice(i));
        }
        let op = Op::GatherRows {
            x: self.id,
            index: index.into(),
        };
        self.graph.push(
            "gather_rows",
            Tensor::new([index.len(), x.cols()], data)?,
            op,
        )
    }

    /// Adds row `k` of `self` into row `index[k]` of an `[rows, cols]` zero matrix.
    pub fn scatter_rows(self, index: &[usize], rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        if index.len() != x.rows() {
            return Err(AutogradError::InvalidArgument {
                op: "scatter_rows",
                reason: format!("{} indices for {} rows", index.len(), x.rows()),
            });
        }
        let mut out = Tensor::zeros([rows, x.cols()]);
        for (k, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(AutogradError::InvalidArgument {
                    op: "scatter_rows",
                    reason: format!("row {i} out of {rows}"),
                });
            }
            for j in 0..x.cols() {
                out.set(i, j, out.get(i, j) + x.get(k, j));
            }
        }
        let op = Op::ScatterRows {
            x: self.id,
            index: index.into(),
        };
        self.graph.push("scatter_rows", out, op)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(self, lambda: f64) -> Result<Var<'g>> {
        let v = (*self.value()).clone();
        self.graph
            .push("grad_reverse", v, Op::GradReverse { x: self.id, lambda })
    }
}
