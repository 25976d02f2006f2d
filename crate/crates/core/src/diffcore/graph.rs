use std::cell::{Ref, RefCell};

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    BroadcastRows(usize),
    Concat(Vec<usize>),
    Silu(usize),
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    LogSigmoid(usize),
    Square(usize),
    Sum(usize),
    RowSum(usize),
    Mean(usize),
    Scale(usize, S),
    AddScalar(usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of tensor operations for reverse-mode
/// differentiation.
///
/// Node ids are assigned in creation order, so reverse id order is a valid
/// reverse topological order. A graph is built per loss evaluation and
/// dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    screen: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g, S> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            screen: cfg!(debug_assertions),
        }
    }

    /// Forces non-finite screening after every operation, also in release
    /// builds.
    pub fn with_screening(mut self, on: bool) -> Self {
        self.screen = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var<'_, S>) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn push_unchecked(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var<'_, S>> {
        if self.screen && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; output.id + 1];
        if out.requires_grad {
            grads[output.id] = Some(Tensor::full(out.value.shape(), S::one()));
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |i: usize, contrib: Tensor<S>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), "mul'", |x, y| x * y)?);
                    acc(*b, g.zip_map(val(*a), "mul'", |x, y| x * y)?);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(false, val(*b), true)?;
                    let gb = val(*a).matmul_t(true, &g, false)?;
                    acc(*a, ga.reshape(val(*a).shape().to_vec())?);
                    acc(*b, gb.reshape(val(*b).shape().to_vec())?);
                }
                Op::BroadcastRows(x) => {
                    let (rows, cols) = g.dims2("broadcast'")?;
                    let mut col = vec![S::zero(); cols];
                    for r in 0..rows {
                        for (c, v) in col.iter_mut().zip(g.row(r)) {
                            *c += *v;
                        }
                    }
                    acc(*x, Tensor::raw(val(*x).shape().to_vec(), col));
                }
                Op::Concat(parts) => {
                    let (rows, cols) = g.dims2("concat'")?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = val(p).dims2("concat'")?;
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * cols + offset..r * cols + offset + w]);
                        }
                        acc(p, Tensor::raw(val(p).shape().to_vec(), data));
                        offset += w;
                    }
                }
                Op::Silu(x) => acc(
                    *x,
                    g.zip_map(val(*x), "silu'", |g, x| {
                        let s = tensor::sigmoid(x);
                        g * s * (S::one() + x * (S::one() - s))
                    })?,
                ),
                Op::Relu(x) => acc(
                    *x,
                    g.zip_map(val(*x), "relu'", |g, x| if x > S::zero() { g } else { S::zero() })?,
                ),
                Op::Sigmoid(x) => {
                    acc(*x, g.zip_map(&node.value, "sigmoid'", |g, s| g * s * (S::one() - s))?)
                }
                Op::Ln(x) => acc(*x, g.zip_map(val(*x), "ln'", |g, x| g / x)?),
                Op::LogSigmoid(x) => {
                    acc(*x, g.zip_map(val(*x), "log_sigmoid'", |g, x| g * tensor::sigmoid(-x))?)
                }
                Op::Square(x) => {
                    acc(*x, g.zip_map(val(*x), "square'", |g, x| g * (x + x))?)
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    acc(*x, Tensor::full(val(*x).shape(), gv));
                }
                Op::Mean(x) => {
                    let n = S::of(val(*x).len() as f64);
                    let gv = g.data()[0] / n;
                    acc(*x, Tensor::full(val(*x).shape(), gv));
                }
                Op::RowSum(x) => {
                    let (rows, cols) = val(*x).dims2("row_sum'")?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv, cols));
                    }
                    acc(*x, Tensor::raw(val(*x).shape().to_vec(), data));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(*x, g.map(|v| v * c));
                }
                Op::AddScalar(x) => acc(*x, g),
                Op::GatherRows(table, idx) => {
                    let (rows, cols) = val(*table).dims2("gather'")?;
                    let mut data = vec![S::zero(); rows * cols];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            data[i * cols + c] += g.data()[r * cols + c];
                        }
                    }
                    acc(*table, Tensor::raw(val(*table).shape().to_vec(), data));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn inputs<S>(op: &Op<S>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Concat(p) => p.clone(),
        Op::BroadcastRows(x)
        | Op::Silu(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Ln(x)
        | Op::LogSigmoid(x)
        | Op::Square(x)
        | Op::Sum(x)
        | Op::RowSum(x)
        | Op::Mean(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::GatherRows(x, _) => vec![*x],
    }
}

/// Gradients of one backward pass, indexed by the graph's leaves.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zeros when `v` is unreachable from the
    /// output or detached.
    pub fn wrt(&self, v: Var<'_, S>) -> Tensor<S> {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.graph.value(v).shape()),
        }
    }

    /// Whether any nonzero gradient reached `v`.
    pub fn reached(&self, v: Var<'_, S>) -> bool {
        self.grads.get(v.id).is_some_and(Option::is_some)
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<S>> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, name: &'static str, op: Op<S>, f: impl Fn(S) -> S) -> Result<Self> {
        let out = self.value().map(f);
        self.graph.push(name, out, op)
    }

    fn binary(self, other: Self, name: &'static str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        let out = self.value().zip_map(&other.value(), name, f)?;
        self.graph.push(name, out, op)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let out = self.value().matmul(&other.value())?;
        self.graph.push("matmul", out, Op::MatMul(self.id, other.id))
    }

    /// Repeats a `[n]` or `[1, n]` tensor into `[rows, n]`.
    pub fn broadcast_rows(self, rows: usize) -> Result<Self> {
        let out = {
            let v = self.value();
            let (r, c) = v.dims2("broadcast_rows")?;
            if r != 1 {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_rows",
                    lhs: v.shape().to_vec(),
                    rhs: vec![rows, c],
                });
            }
            let mut data = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                data.extend_from_slice(v.data());
            }
            Tensor::raw(vec![rows, c], data)
        };
        self.graph.push("broadcast_rows", out, Op::BroadcastRows(self.id))
    }

    /// `self + bias` with `bias` broadcast across rows.
    pub fn add_row(self, bias: Self) -> Result<Self> {
        let (rows, _) = self.value().dims2("add_row")?;
        self.add(bias.broadcast_rows(rows)?)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let graph = first.graph;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let (rows, _) = vals[0].dims2("concat")?;
            let mut widths = Vec::with_capacity(vals.len());
            for v in &vals {
                let (r, c) = v.dims2("concat")?;
                if r != rows || v.shape().len() != 2 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vals[0].shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::raw(vec![rows, total], data)
        };
        graph.push("concat", out, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    pub fn silu(self) -> Result<Self> {
        self.unary("silu", Op::Silu(self.id), tensor::silu)
    }

    pub fn relu(self) -> Result<Self> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(S::zero()))
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid(self.id), tensor::sigmoid)
    }

    pub fn ln(self) -> Result<Self> {
        self.unary("ln", Op::Ln(self.id), |x| x.ln())
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(self) -> Result<Self> {
        self.unary("log_sigmoid", Op::LogSigmoid(self.id), tensor::log_sigmoid)
    }

    pub fn square(self) -> Result<Self> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn scale(self, c: S) -> Result<Self> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-S::one())
    }

    pub fn add_scalar(self, c: S) -> Result<Self> {
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Self> {
        let s = self.value().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let (s, n) = {
            let v = self.value();
            (v.sum(), v.len())
        };
        if n == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        self.graph.push("mean", Tensor::scalar(s / S::of(n as f64)), Op::Mean(self.id))
    }

    /// Per-row sums of a matrix, giving a `[rows]` vector.
    pub fn row_sum(self) -> Result<Self> {
        let out = {
            let v = self.value();
            let (rows, _) = v.dims2("row_sum")?;
            let data: Vec<S> = (0..rows).map(|r| v.row(r).iter().copied().sum()).collect();
            Tensor::raw(vec![rows], data)
        };
        self.graph.push("row_sum", out, Op::RowSum(self.id))
    }

    /// Selects rows of a `[n, e]` table.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Self> {
        let out = {
            let v = self.value();
            let (rows, cols) = v.dims2("gather_rows")?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: v.shape().to_vec(),
                    rhs: vec![bad],
                });
            }
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(v.row(i));
            }
            Tensor::raw(vec![idx.len(), cols], data)
        };
        self.graph.push("gather_rows", out, Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Same value, no gradient through this edge.
    pub fn stop_gradient(self) -> Self {
        let v = self.value().clone();
        self.graph.push_unchecked(v, Op::Leaf, false)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> Result<S> {
        self.value().item()
    }
}
