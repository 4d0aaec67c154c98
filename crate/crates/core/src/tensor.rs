//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations on tensors
//! that require gradients record their inputs, so the resulting values form
//! a DAG that [`Tensor::backward`] walks in reverse topological order.
//! Tensors that do not require gradients carry no graph and behave as plain
//! immutable arrays.
//!
//! Broadcasting is limited to a rank-0 operand combined with a tensor of any
//! shape. Row-wise bias addition goes through the explicit
//! [`Tensor::expand_rows`] operation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Square(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Softplus(Tensor),
    Scale(Tensor, f64),
    Offset(Tensor),
    Clamp(Tensor, f64, f64),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Sum(Tensor, Option<usize>),
    Mean(Tensor, Option<usize>),
    ExpandRows(Tensor),
    NarrowCols(Tensor, usize),
    ConcatCols(Tensor, Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::ExpandRows(a)
            | Op::NarrowCols(a, _) => vec![a],
        }
    }
}

/// Elementwise operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Square,
    Negate,
    Tanh,
    Relu,
    Softplus,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }
}

/// Applies `op` to `a` (and `b` for binary operations).
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op.is_binary(), b) {
        (true, None) => Err(Error::InvalidArgument(format!(
            "{op:?} needs a second operand"
        ))),
        (false, Some(_)) => Err(Error::InvalidArgument(format!(
            "{op:?} takes a single operand"
        ))),
        (true, Some(b)) => match op {
            ElementwiseOp::Add => a.add(b),
            ElementwiseOp::Sub => a.sub(b),
            ElementwiseOp::Mul => a.mul(b),
            _ => a.div(b),
        },
        (false, None) => match op {
            ElementwiseOp::Exp => Ok(a.exp()),
            ElementwiseOp::Log => a.ln(),
            ElementwiseOp::Square => Ok(a.square()),
            ElementwiseOp::Negate => Ok(a.neg()),
            ElementwiseOp::Tanh => Ok(a.tanh()),
            ElementwiseOp::Relu => Ok(a.relu()),
            _ => Ok(a.softplus()),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

pub fn reduce(op: ReduceOp, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match op {
        ReduceOp::Sum => a.sum(axis),
        ReduceOp::Mean => a.mean(axis),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {} values but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            op: Op::Leaf,
        })))
    }

    /// A constant tensor that never receives gradients.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::leaf(data, shape, false)
    }

    /// A trainable leaf: gradients for it are reported by [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::leaf(data, shape, true)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![], false).expect("scalar shape is valid")
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::new(data, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(vec![0.0; numel(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::new(vec![value; numel(shape)], shape.to_vec())
    }

    /// Builds a `[rows.len() x width]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument("rows have unequal lengths".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(data, vec![rows.len(), width])
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn rows(&self) -> usize {
        self.0.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.0.shape.get(1).copied().unwrap_or(1)
    }

    /// A gradient-free copy of the values.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.shape().to_vec(), false).expect("shape already valid")
    }

    /// Same values as a fresh trainable leaf.
    pub fn as_param(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.shape().to_vec(), true).expect("shape already valid")
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "{op} expects a rank-2 tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.0.data.iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.0.shape.clone(), data, op)
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        let (a, b) = (&self.0, &other.0);
        let (shape, data) = if a.shape == b.shape {
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data)
        } else if b.shape.is_empty() {
            let y = b.data[0];
            (a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect())
        } else if a.shape.is_empty() {
            let x = a.data[0];
            (b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        };
        Ok(Tensor::from_op(shape, data, op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "add",
            |x, y| x + y,
            Op::Add(self.clone(), other.clone()),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            Op::Sub(self.clone(), other.clone()),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "mul",
            |x, y| x * y,
            Op::Mul(self.clone(), other.clone()),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(
            other,
            "div",
            |x, y| x / y,
            Op::Div(self.clone(), other.clone()),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, Op::Neg(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of nonpositive value {bad}"),
            });
        }
        Ok(self.unary(f64::ln, Op::Log(self.clone())))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, Op::Square(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(stable_softplus, Op::Softplus(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, Op::Offset(self.clone()))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp(self.clone(), lo, hi))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let data = transpose_raw(self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            Op::Transpose(self.clone()),
        ))
    }

    fn reduce_axis(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let op = if mean {
            Op::Mean(self.clone(), axis)
        } else {
            Op::Sum(self.clone(), axis)
        };
        match axis {
            None => {
                let s: f64 = self.data().iter().sum();
                let v = if mean { s / self.numel() as f64 } else { s };
                Ok(Tensor::from_op(vec![], vec![v], op))
            }
            Some(axis) => {
                if axis >= self.rank() {
                    return Err(Error::InvalidAxis {
                        axis,
                        rank: self.rank(),
                    });
                }
                let (outer, len, inner) = axis_extents(self.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let src = self.data();
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = self.shape().to_vec();
                shape.remove(axis);
                Ok(Tensor::from_op(shape, out, op))
            }
        }
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(&self) -> Tensor {
        self.reduce_axis(None, false)
            .expect("full reduction cannot fail")
    }

    pub fn mean_all(&self) -> Tensor {
        self.reduce_axis(None, true)
            .expect("full reduction cannot fail")
    }

    /// Repeats a `[n]` vector into a `[rows x n]` matrix.
    pub fn expand_rows(&self, rows: usize) -> Result<Tensor> {
        if self.rank() != 1 || rows == 0 {
            return Err(Error::InvalidArgument(format!(
                "expand_rows expects a rank-1 tensor and rows > 0, got {:?} and {rows}",
                self.shape()
            )));
        }
        let n = self.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(self.data());
        }
        Ok(Tensor::from_op(
            vec![rows, n],
            data,
            Op::ExpandRows(self.clone()),
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_matrix("narrow_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{} is outside a matrix with {c} columns",
                start + len
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(Tensor::from_op(
            vec![r, len],
            data,
            Op::NarrowCols(self.clone(), start),
        ))
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c1) = self.require_matrix("concat_cols")?;
        let (r2, c2) = other.require_matrix("concat_cols")?;
        if r != r2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.data(), other.data());
        let mut data = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            data.extend_from_slice(&a[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&b[i * c2..(i + 1) * c2]);
        }
        Ok(Tensor::from_op(
            vec![r, c1 + c2],
            data,
            Op::ConcatCols(self.clone(), other.clone()),
        ))
    }

    /// Rows selected by `indices`, as a constant matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(data, vec![indices.len(), c])
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.0.op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a rank-0 output.
    ///
    /// Returns gradients for every trainable leaf reachable from `self`.
    pub fn backward(&self) -> Result<GradientMap> {
        if self.rank() != 0 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        let mut result = GradientMap::default();
        if !self.requires_grad() {
            return Ok(result);
        }
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in self.topological_order().iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                let g = Tensor::new(grad, node.shape().to_vec())?;
                result.grads.insert(node.id(), g);
                continue;
            }
            node.propagate(&grad, &mut pending);
        }
        Ok(result)
    }

    fn propagate(&self, g: &[f64], pending: &mut HashMap<usize, Vec<f64>>) {
        let out = self.data();
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate_broadcast(pending, a, g, |_| 1.0);
                accumulate_broadcast(pending, b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(pending, a, g, |_| 1.0);
                accumulate_broadcast(pending, b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                accumulate_broadcast(pending, a, g, |i| value_at(b, i));
                accumulate_broadcast(pending, b, g, |i| value_at(a, i));
            }
            Op::Div(a, b) => {
                accumulate_broadcast(pending, a, g, |i| 1.0 / value_at(b, i));
                accumulate_broadcast(pending, b, g, |i| {
                    let y = value_at(b, i);
                    -value_at(a, i) / (y * y)
                });
            }
            Op::Neg(a) => accumulate_map(pending, a, g, |_, _| -1.0),
            Op::Exp(a) => accumulate_map(pending, a, g, |i, _| out[i]),
            Op::Log(a) => accumulate_map(pending, a, g, |_, x| 1.0 / x),
            Op::Square(a) => accumulate_map(pending, a, g, |_, x| 2.0 * x),
            Op::Tanh(a) => accumulate_map(pending, a, g, |i, _| 1.0 - out[i] * out[i]),
            Op::Relu(a) => accumulate_map(pending, a, g, |_, x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus(a) => accumulate_map(pending, a, g, |_, x| sigmoid(x)),
            Op::Scale(a, c) => accumulate_map(pending, a, g, |_, _| *c),
            Op::Offset(a) => accumulate_map(pending, a, g, |_, _| 1.0),
            Op::Clamp(a, lo, hi) => {
                accumulate_map(
                    pending,
                    a,
                    g,
                    |_, x| {
                        if x >= *lo && x <= *hi {
                            1.0
                        } else {
                            0.0
                        }
                    },
                )
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.0.shape[0], a.0.shape[1]);
                let n = b.0.shape[1];
                if a.requires_grad() {
                    let bt = transpose_raw(b.data(), k, n);
                    accumulate(pending, a, matmul_raw(g, &bt, m, n, k));
                }
                if b.requires_grad() {
                    let at = transpose_raw(a.data(), m, k);
                    accumulate(pending, b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                accumulate(pending, a, transpose_raw(g, c, r));
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let is_mean = matches!(self.0.op, Op::Mean(..));
                let grad = match axis {
                    None => {
                        let v = if is_mean {
                            g[0] / a.numel() as f64
                        } else {
                            g[0]
                        };
                        vec![v; a.numel()]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_extents(a.shape(), *axis);
                        let scale = if is_mean { 1.0 / len as f64 } else { 1.0 };
                        let mut grad = vec![0.0; a.numel()];
                        for o in 0..outer {
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for i in 0..inner {
                                    grad[base + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        grad
                    }
                };
                accumulate(pending, a, grad);
            }
            Op::ExpandRows(a) => {
                let n = a.numel();
                let mut grad = vec![0.0; n];
                for row in g.chunks(n) {
                    grad.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                accumulate(pending, a, grad);
            }
            Op::NarrowCols(a, start) => {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                let len = self.0.shape[1];
                let mut grad = vec![0.0; r * c];
                for i in 0..r {
                    grad[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(pending, a, grad);
            }
            Op::ConcatCols(a, b) => {
                let r = a.0.shape[0];
                let (c1, c2) = (a.0.shape[1], b.0.shape[1]);
                let c = c1 + c2;
                if a.requires_grad() {
                    let grad = (0..r)
                        .flat_map(|i| g[i * c..i * c + c1].iter().copied())
                        .collect();
                    accumulate(pending, a, grad);
                }
                if b.requires_grad() {
                    let grad = (0..r)
                        .flat_map(|i| g[i * c + c1..(i + 1) * c].iter().copied())
                        .collect();
                    accumulate(pending, b, grad);
                }
            }
        }
    }
}

fn value_at(t: &Tensor, i: usize) -> f64 {
    if t.rank() == 0 {
        t.0.data[0]
    } else {
        t.0.data[i]
    }
}

fn accumulate(pending: &mut HashMap<usize, Vec<f64>>, target: &Tensor, grad: Vec<f64>) {
    if !target.requires_grad() {
        return;
    }
    match pending.get_mut(&target.id()) {
        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
        None => {
            pending.insert(target.id(), grad);
        }
    }
}

/// `local(i, x)` is the local derivative at output index `i` and input value `x`.
fn accumulate_map(
    pending: &mut HashMap<usize, Vec<f64>>,
    target: &Tensor,
    g: &[f64],
    local: impl Fn(usize, f64) -> f64,
) {
    if !target.requires_grad() {
        return;
    }
    let grad = g
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&gi, &x))| gi * local(i, x))
        .collect();
    accumulate(pending, target, grad);
}

/// Binary-op variant: a rank-0 target sums the gradient over all outputs.
fn accumulate_broadcast(
    pending: &mut HashMap<usize, Vec<f64>>,
    target: &Tensor,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if !target.requires_grad() {
        return;
    }
    let contrib = g.iter().enumerate().map(|(i, &gi)| gi * local(i));
    let grad = if target.rank() == 0 && g.len() != 1 {
        vec![contrib.sum()]
    } else {
        contrib.collect()
    };
    accumulate(pending, target, grad);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients keyed by the identity of trainable leaf tensors.
///
/// A missing entry means the gradient is zero.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: HashMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, param: &Tensor) -> Option<&Tensor> {
        self.grads.get(&param.id())
    }

    /// Gradient values for `param`, zero-filled when absent.
    pub fn values_or_zero(&self, param: &Tensor) -> Vec<f64> {
        self.get(param)
            .map(Tensor::to_vec)
            .unwrap_or_else(|| vec![0.0; param.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum of two gradient maps.
    pub fn merged(&self, other: &GradientMap) -> Result<GradientMap> {
        let mut grads = self.grads.clone();
        for (id, g) in &other.grads {
            let combined = match grads.get(id) {
                Some(existing) => existing.add(g)?,
                None => g.clone(),
            };
            grads.insert(*id, combined);
        }
        Ok(GradientMap { grads })
    }

    /// Global L2 norm over the gradients of `params`.
    pub fn global_norm(&self, params: &[Tensor]) -> f64 {
        params
            .iter()
            .filter_map(|p| self.get(p))
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales every gradient so the global norm over `params` is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, params: &[Tensor], max_norm: f64) -> f64 {
        let norm = self.global_norm(params);
        if norm > max_norm && norm.is_finite() {
            let factor = max_norm / norm;
            for g in self.grads.values_mut() {
                *g = g.scale(factor);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    fn p(data: &[f64]) -> Tensor {
        Tensor::param(data.to_vec(), vec![data.len()]).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let out = elementwise(ElementwiseOp::Add, &v(&[1.0, 2.0]), Some(&v(&[3.0, 4.0]))).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn exp_of_zero() {
        let out = elementwise(ElementwiseOp::Exp, &v(&[0.0, 0.0, 0.0]), None).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_backward() {
        let x = p(&[1.0, 2.0, 3.0]);
        let grads = x.square().sum_all().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = v(&[1.0, 2.0]).add(&v(&[1.0, 2.0, 3.0])).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        assert!(matches!(v(&[1.0, 0.0]).ln(), Err(Error::Domain { .. })));
        assert!(matches!(v(&[-1.0]).ln(), Err(Error::Domain { .. })));
        assert!(matches!(
            v(&[1.0]).div(&v(&[0.0])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn scalar_broadcast_backward_sums() {
        let s = Tensor::param(vec![2.0], vec![]).unwrap();
        let x = p(&[1.0, 2.0, 3.0]);
        let grads = x.mul(&s).unwrap().sum_all().backward().unwrap();
        assert_eq!(grads.get(&s).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = row.matmul(&col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
        assert!(matches!(
            a.matmul(&row),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradient_with_ones() {
        let a = Tensor::param(vec![0.3, -1.2, 0.5, 2.0, 1.0, -0.7], vec![2, 3]).unwrap();
        let b = Tensor::full(&[3, 4], 1.0).unwrap();
        let grads = a.matmul(&b).unwrap().sum_all().backward().unwrap();
        assert!(grads.get(&a).unwrap().data().iter().all(|&g| g == 4.0));
    }

    #[test]
    fn reductions() {
        assert_eq!(v(&[1.0, 2.0, 3.0]).sum_all().item(), 6.0);
        assert_eq!(v(&[2.0, 4.0]).mean_all().item(), 3.0);
        let x = p(&[1.0, 5.0, -2.0, 7.0]);
        let grads = x.mean_all().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.25; 4]);
        let m = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        assert_eq!(m.sum(Some(0)).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.sum(Some(1)).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(m.mean(Some(1)).unwrap().data(), &[2.0, 5.0]);
        assert!(matches!(
            m.sum(Some(2)),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn backward_examples() {
        let x = p(&[1.0, 1.0, 1.0]);
        let g = x.sum_all().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
        let y = p(&[1.0, -2.0]);
        let g = y.mul(&y).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.get(&y).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = p(&[1.0, 2.0]);
        assert!(matches!(x.square().backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let x = p(&[1.0, 2.0]);
        let d = x.detach();
        let grads = x.mul(&d).unwrap().sum_all().backward().unwrap();
        assert!(grads.get(&d).is_none());
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice; gradient of 2*sum(x^2) is 4x.
        let x = p(&[1.5, -0.5]);
        let y = x.square();
        let z = y.add(&y).unwrap().sum_all();
        let grads = z.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = p(&[0.0, 1.0, -1.0]);
        let grads = x.relu().sum_all().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        let out = v(&[-800.0, 0.0, 800.0]).softplus();
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.data()[2], 800.0);
    }

    #[test]
    fn column_ops_roundtrip() {
        let m = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let left = m.narrow_cols(0, 1).unwrap();
        let right = m.narrow_cols(1, 2).unwrap();
        let joined = left.concat_cols(&right).unwrap();
        assert_eq!(joined.data(), m.data());
        let grads = joined.scale(3.0).sum_all().backward().unwrap();
        assert_eq!(grads.get(&m).unwrap().data(), &[3.0; 6]);
    }

    #[test]
    fn expand_rows_backward_sums_columns() {
        let b = p(&[1.0, 2.0]);
        let e = b.expand_rows(3).unwrap();
        assert_eq!(e.shape(), &[3, 2]);
        let grads = e.sum_all().backward().unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_record_no_graph() {
        let a = v(&[1.0, 2.0]);
        let b = a.exp().add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.sum_all().backward().unwrap().is_empty());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let x = p(&[30.0, 40.0]);
        let mut grads = x.square().sum_all().backward().unwrap();
        let before = grads.clip_global_norm(std::slice::from_ref(&x), 10.0);
        assert!((before - 100.0).abs() < 1e-12);
        assert!((grads.global_norm(std::slice::from_ref(&x)) - 10.0).abs() < 1e-12);
    }
}
