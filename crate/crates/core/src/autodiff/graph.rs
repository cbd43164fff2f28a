use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
///
/// `Relu` has a zero second derivative almost everywhere: its derivative is
/// expressed through `Step`, which is treated as locally constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Recip,
    /// Heaviside step `x > 0`; derivative taken as zero.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LeafKind {
    Input,
    Constant,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Unary(Unary, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `n×m + 1×m`, the row broadcast over every row.
    AddRow(NodeId, NodeId),
    SumAll(NodeId),
    /// `n×m -> 1×m`
    SumRows(NodeId),
    /// `n×m -> n×1`
    SumCols(NodeId),
    /// `1×m -> n×m`
    BroadcastRows(NodeId, usize),
    /// `n×1 -> n×m`
    BroadcastCols(NodeId, usize),
    /// `1×1 -> shape`
    Expand(NodeId, Vec<usize>),
    SoftmaxRows(NodeId),
    /// `n×m -> n×1`
    LogSumExpRows(NodeId),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) => vec![*a, *b],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | Unary(_, a)
            | Transpose(a)
            | SumAll(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a, _)
            | BroadcastCols(a, _)
            | Expand(a, _)
            | SoftmaxRows(a)
            | LogSumExpRows(a) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf(_) => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Neg(..) => "neg",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Unary(..) => "unary",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            AddRow(..) => "add_row",
            SumAll(..) => "sum_all",
            SumRows(..) => "sum_rows",
            SumCols(..) => "sum_cols",
            BroadcastRows(..) => "broadcast_rows",
            BroadcastCols(..) => "broadcast_cols",
            Expand(..) => "expand",
            SoftmaxRows(..) => "softmax_rows",
            LogSumExpRows(..) => "logsumexp_rows",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Arc<Tensor<T>>,
}

/// Append-only computation graph with eager evaluation.
///
/// Every builder call evaluates the new node immediately, so a graph is also
/// a record of one forward pass. [`Graph::forward`] replays the recorded
/// operations with new leaf values; [`Graph::grad`] appends the reverse pass
/// as ordinary nodes, which makes gradients differentiable again.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn apply_unary<T: Scalar>(f: Unary, x: T) -> T {
    match f {
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(T::zero()),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Recip => T::one() / x,
        Unary::Step => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(mismatch(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.rows(), t.cols()))
}

fn eval<'a, T: Scalar>(op: &Op<T>, get: impl Fn(NodeId) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    use Op::*;
    let v = |id: &NodeId| get(*id);
    let out = match op {
        Leaf(_) => unreachable!("leaves carry their value"),
        Add(a, b) => v(a).zip_map(v(b), "add", |x, y| x + y)?,
        Sub(a, b) => v(a).zip_map(v(b), "sub", |x, y| x - y)?,
        Mul(a, b) => v(a).zip_map(v(b), "mul", |x, y| x * y)?,
        Neg(a) => v(a).map(|x| -x),
        Scale(a, c) => {
            let c = *c;
            v(a).map(|x| x * c)
        }
        AddScalar(a, c) => {
            let c = *c;
            v(a).map(|x| x + c)
        }
        Unary(f, a) => {
            let f = *f;
            v(a).map(|x| apply_unary(f, x))
        }
        MatMul(a, b) => {
            require_matrix("matmul", v(a))?;
            require_matrix("matmul", v(b))?;
            v(a).matmul(v(b))?
        }
        Transpose(a) => {
            require_matrix("transpose", v(a))?;
            v(a).transpose()
        }
        AddRow(a, b) => {
            let (n, m) = require_matrix("add_row", v(a))?;
            let row = v(b);
            if row.shape() != [1, m] {
                return Err(mismatch("add_row", format!("{n}x{m} + {:?}", row.shape())));
            }
            let mut out = v(a).clone();
            for r in 0..n {
                for (o, &b) in out.row_slice_mut(r).iter_mut().zip(row.data()) {
                    *o += b;
                }
            }
            out
        }
        SumAll(a) => Tensor::scalar(v(a).sum()),
        SumRows(a) => {
            let (n, m) = require_matrix("sum_rows", v(a))?;
            let mut out = vec![T::zero(); m];
            for r in 0..n {
                for (o, &x) in out.iter_mut().zip(v(a).row_slice(r)) {
                    *o += x;
                }
            }
            Tensor::row(out)
        }
        SumCols(a) => {
            let (n, _) = require_matrix("sum_cols", v(a))?;
            Tensor::column(
                (0..n)
                    .map(|r| v(a).row_slice(r).iter().copied().sum())
                    .collect(),
            )
        }
        BroadcastRows(a, n) => {
            let (r, m) = require_matrix("broadcast_rows", v(a))?;
            if r != 1 {
                return Err(mismatch(
                    "broadcast_rows",
                    format!("expected a row, got {r}x{m}"),
                ));
            }
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..*n {
                data.extend_from_slice(v(a).data());
            }
            Tensor::matrix(*n, m, data)?
        }
        BroadcastCols(a, m) => {
            let (n, c) = require_matrix("broadcast_cols", v(a))?;
            if c != 1 {
                return Err(mismatch(
                    "broadcast_cols",
                    format!("expected a column, got {n}x{c}"),
                ));
            }
            let mut data = Vec::with_capacity(n * m);
            for &x in v(a).data() {
                data.extend(std::iter::repeat(x).take(*m));
            }
            Tensor::matrix(n, *m, data)?
        }
        Expand(a, shape) => {
            if !v(a).is_scalar() {
                return Err(mismatch(
                    "expand",
                    format!("expected a scalar, got {:?}", v(a).shape()),
                ));
            }
            Tensor::full(shape, v(a).data()[0])
        }
        SoftmaxRows(a) => {
            let (n, m) = require_matrix("softmax_rows", v(a))?;
            let mut data = Vec::with_capacity(n * m);
            for r in 0..n {
                data.extend(softmax(v(a).row_slice(r)));
            }
            Tensor::matrix(n, m, data)?
        }
        LogSumExpRows(a) => {
            let (n, _) = require_matrix("logsumexp_rows", v(a))?;
            Tensor::column((0..n).map(|r| logsumexp(v(a).row_slice(r))).collect())
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(out)
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&x| (x - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, kind: LeafKind, value: Arc<Tensor<T>>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Variable leaf; may be replaced on [`Graph::forward`] replay.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(LeafKind::Input, Arc::new(value))
    }

    /// Variable leaf sharing an existing tensor (no copy).
    pub fn input_shared(&mut self, value: Arc<Tensor<T>>) -> Result<NodeId> {
        self.leaf(LeafKind::Input, value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(LeafKind::Constant, Arc::new(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let nodes = &self.nodes;
        let value = eval(&op, |id| &*nodes[id.0].value)?;
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn unary(&mut self, f: Unary, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(f, a))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, row))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumCols(a))
    }
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.push(Op::BroadcastRows(a, n))
    }
    pub fn broadcast_cols(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        self.push(Op::BroadcastCols(a, m))
    }
    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Expand(a, shape.to_vec()))
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(a))
    }
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExpRows(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Sum of squares as a `1×1` node.
    pub fn norm_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        self.sum(sq)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Replays every recorded operation with some input leaves replaced.
    ///
    /// Replacement tensors must have the shape of the leaf they replace.
    /// Returns the recomputed value of every node, in node order.
    pub fn forward(&self, replace: &[(NodeId, Tensor<T>)]) -> Result<Vec<Arc<Tensor<T>>>> {
        self.forward_upto(self.nodes.len(), replace)
    }

    /// Replays and returns only the value of `out`.
    pub fn forward_node(&self, out: NodeId, replace: &[(NodeId, Tensor<T>)]) -> Result<Tensor<T>> {
        let vals = self.forward_upto(out.0 + 1, replace)?;
        Ok(vals[out.0].as_ref().clone())
    }

    fn forward_upto(
        &self,
        upto: usize,
        replace: &[(NodeId, Tensor<T>)],
    ) -> Result<Vec<Arc<Tensor<T>>>> {
        let mut vals: Vec<Arc<Tensor<T>>> = Vec::with_capacity(upto);
        for (i, node) in self.nodes[..upto].iter().enumerate() {
            let value = match &node.op {
                Op::Leaf(kind) => match replace.iter().find(|(id, _)| id.0 == i) {
                    Some((_, t)) => {
                        if *kind != LeafKind::Input {
                            return Err(Error::InvalidArgument(format!("node {i} is a constant")));
                        }
                        if t.shape() != node.value.shape() {
                            return Err(mismatch(
                                "forward",
                                format!(
                                    "leaf {i} has shape {:?}, got {:?}",
                                    node.value.shape(),
                                    t.shape()
                                ),
                            ));
                        }
                        if !t.all_finite() {
                            return Err(Error::NonFinite { op: "leaf" });
                        }
                        Arc::new(t.clone())
                    }
                    None => Arc::clone(&node.value),
                },
                op => Arc::new(eval(op, |id| &*vals[id.0])?),
            };
            vals.push(value);
        }
        for (id, _) in replace {
            if id.0 >= self.nodes.len() || !matches!(self.nodes[id.0].op, Op::Leaf(_)) {
                return Err(Error::InvalidArgument(format!(
                    "node {} is not a leaf",
                    id.0
                )));
            }
        }
        Ok(vals)
    }
}
