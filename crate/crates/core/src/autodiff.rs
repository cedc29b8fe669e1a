//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so node inputs
//! always precede the node itself. Graphs are built per training step and
//! dropped afterwards.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entry-wise functions of one argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    HardTanh,
    Sigmoid,
    Relu,
    Ln,
    Exp,
    Square,
    Sqrt,
    Softplus,
    Neg,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::HardTanh => x.clamp(-1.0, 1.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Ln => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Neg => -x,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::HardTanh => {
                if x.abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Ln => 1.0 / x,
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Softplus => sigmoid(x),
            Unary::Neg => -1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::HardTanh => "hardtanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Ln => "ln",
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Softplus => "softplus",
            Unary::Neg => "neg",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BatchMatMul { a: usize, b: usize, ta: bool, tb: bool },
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Unary(Unary, usize),
    ClampMin(usize, f64),
    Softmax(usize, usize),
    CausalSoftmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize, f64),
    Sum(usize),
    SumLast(usize),
    Reshape(usize),
    SliceLast { a: usize, start: usize },
    ConcatLast(usize, usize),
    Gather { table: usize, ids: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of tensor operations for one backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to differentiable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Binary(_, a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) | Op::ConcatLast(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Scale(a, _)
            | Op::Unary(_, a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a, _)
            | Op::CausalSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::Sum(a)
            | Op::SumLast(a)
            | Op::Reshape(a)
            | Op::SliceLast { a, .. } => self.rg(*a),
            Op::Gather { table, .. } => self.rg(*table),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) op(b)` for 2-D operands, `op` being an optional transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b), ta, tb)?;
        self.push(v, Op::MatMul { a: a.0, b: b.0, ta, tb }, "matmul")
    }

    /// Batched product over the leading axis of 3-D operands.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = self.value(a).bmm_t(self.value(b), ta, tb)?;
        self.push(v, Op::BatchMatMul { a: a.0, b: b.0, ta, tb }, "bmm")
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (name, v) = match kind {
            Binary::Add => ("add", x.add(y)?),
            Binary::Sub => ("sub", x.sub(y)?),
            Binary::Mul => ("mul", x.mul(y)?),
            Binary::Div => ("div", x.zip_map(y, "div", |p, q| p / q)?),
        };
        self.push(v, Op::Binary(kind, a.0, b.0), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a.0, c), "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    /// Adds a vector of length `last_dim(a)` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = row_op(self.value(a), self.value(row), "add_row", |x, r| x + r)?;
        self.push(v, Op::AddRow(a.0, row.0), "add_row")
    }

    /// Multiplies every row of `a` entry-wise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = row_op(self.value(a), self.value(row), "mul_row", |x, r| x * r)?;
        self.push(v, Op::MulRow(a.0, row.0), "mul_row")
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let x = self.value(a);
        match f {
            Unary::Ln if x.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain("ln of a non-positive entry".into()))
            }
            Unary::Sqrt if x.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain("sqrt of a non-positive entry".into()))
            }
            _ => {}
        }
        let data = x.data().iter().map(|&v| f.apply(v)).collect();
        let v = Tensor::new(x.shape().to_vec(), data).map_err(|_| Error::NonFinite(f.name()))?;
        self.push(v, Op::Unary(f, a.0), f.name())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(floor))?;
        self.push(v, Op::ClampMin(a.0, floor), "clamp_min")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).softmax(axis)?;
        self.push(v, Op::Softmax(a.0, axis), "softmax")
    }

    /// Row-wise softmax over the last axis of a `[.., s, s]` score tensor where
    /// entry `(i, j)` with `j > i` is masked out and receives exactly zero
    /// probability.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let r = x.rank();
        if r < 2 || x.shape()[r - 1] != x.shape()[r - 2] {
            return Err(Error::Invalid(format!(
                "causal softmax needs square trailing dims, got {:?}",
                x.shape()
            )));
        }
        let s = x.last_dim();
        let mut out = x.data().to_vec();
        for (ri, row) in out.chunks_mut(s).enumerate() {
            let i = ri % s;
            let mx = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in &mut row[..=i] {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in &mut row[..=i] {
                *v /= z;
            }
            for v in &mut row[i + 1..] {
                *v = 0.0;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::CausalSoftmax(a.0), "causal_softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::LogSoftmax(a.0), "log_softmax")
    }

    /// Normalises each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::LayerNorm(a.0, eps), "layer_norm")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0), "sum")
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let data: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::SumLast(a.0), "sum_last")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a.0), "reshape")
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        if start >= end || end > c {
            return Err(Error::Invalid(format!("slice {start}..{end} of width {c}")));
        }
        let data: Vec<f64> = x.data().chunks(c).flat_map(|r| r[start..end].iter().copied()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::SliceLast { a: a.0, start }, "slice_last")
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != y.rank() || x.rows() != y.rows() || x.shape()[..x.rank() - 1] != y.shape()[..y.rank() - 1] {
            return shape_err("concat_last", x.shape(), y.shape());
        }
        let (ca, cb) = (x.last_dim(), y.last_dim());
        let mut data = Vec::with_capacity(x.numel() + y.numel());
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::ConcatLast(a.0, b.0), "concat_last")
    }

    /// Row lookup: output row `i` is row `ids[i]` of the 2-D `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Invalid("gather needs a 2-D table".into()));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Invalid(format!("gather index {i} out of range {n}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            v,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaf_grads)?;
        }
        for g in leaf_grads.iter().flatten() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        leaf_grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, t: Tensor| -> Result<()> {
            if !self.nodes[j].requires_grad {
                return Ok(());
            }
            let slot = &mut grads[j];
            match slot {
                Some(existing) => existing.axpy(1.0, &t)?,
                None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {
                leaf_grads[i] = Some(g);
            }
            &Op::MatMul { a, b, ta, tb } => {
                if self.rg(a) {
                    let da = if ta {
                        val(b).matmul_t(&g, tb, true)?
                    } else {
                        g.matmul_t(val(b), false, !tb)?
                    };
                    acc(a, da)?;
                }
                if self.rg(b) {
                    let db = if tb {
                        g.matmul_t(val(a), true, ta)?
                    } else {
                        val(a).matmul_t(&g, !ta, false)?
                    };
                    acc(b, db)?;
                }
            }
            &Op::BatchMatMul { a, b, ta, tb } => {
                if self.rg(a) {
                    let da = if ta {
                        val(b).bmm_t(&g, tb, true)?
                    } else {
                        g.bmm_t(val(b), false, !tb)?
                    };
                    acc(a, da)?;
                }
                if self.rg(b) {
                    let db = if tb {
                        g.bmm_t(val(a), true, ta)?
                    } else {
                        val(a).bmm_t(&g, !ta, false)?
                    };
                    acc(b, db)?;
                }
            }
            &Op::Binary(kind, a, b) => {
                let (x, y) = (val(a), val(b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g),
                    Binary::Sub => (g.clone(), g.scale(-1.0)),
                    Binary::Mul => (g.mul(y)?, g.mul(x)?),
                    Binary::Div => {
                        let ga = g.zip_map(y, "div", |p, q| p / q)?;
                        // d(x/y)/dy = -x / y^2
                        let q = x.zip_map(y, "div", |p, q| -p / (q * q))?;
                        (ga, g.mul(&q)?)
                    }
                };
                if self.rg(a) {
                    acc(a, reduce_to(ga, x.shape()))?;
                }
                if self.rg(b) {
                    acc(b, reduce_to(gb, y.shape()))?;
                }
            }
            &Op::Scale(a, c) => acc(a, g.scale(c))?,
            &Op::AddRow(a, r) => {
                if self.rg(r) {
                    acc(r, column_sums(&g))?;
                }
                acc(a, g)?;
            }
            &Op::MulRow(a, r) => {
                let (x, row) = (val(a), val(r));
                if self.rg(r) {
                    acc(r, column_sums(&g.mul(x)?))?;
                }
                if self.rg(a) {
                    acc(a, row_op(&g, row, "mul_row", |p, q| p * q)?)?;
                }
            }
            &Op::Unary(f, a) => {
                let (x, y) = (val(a), &node.value);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| gi * f.derivative(xi, yi))
                    .collect();
                acc(a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            &Op::ClampMin(a, floor) => {
                let x = val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > floor { gi } else { 0.0 })
                    .collect();
                acc(a, Tensor::from_parts(x.shape().to_vec(), data))?;
            }
            &Op::Softmax(a, axis) => {
                acc(a, softmax_backward(&node.value, &g, axis))?;
            }
            &Op::CausalSoftmax(a) => {
                let r = node.value.rank() - 1;
                acc(a, softmax_backward(&node.value, &g, r))?;
            }
            &Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut out = g.data().to_vec();
                for (row, yrow) in out.chunks_mut(c).zip(y.data().chunks(c)) {
                    let s: f64 = row.iter().sum();
                    for (o, &ly) in row.iter_mut().zip(yrow) {
                        *o -= ly.exp() * s;
                    }
                }
                acc(a, Tensor::from_parts(y.shape().to_vec(), out))?;
            }
            &Op::LayerNorm(a, eps) => {
                let (x, y) = (val(a), &node.value);
                let c = x.last_dim();
                let n = c as f64;
                let mut out = vec![0.0; x.numel()];
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gm = gr.iter().sum::<f64>() / n;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        out[r * c + j] = inv * (gr[j] - gm - yr[j] * gym);
                    }
                }
                acc(a, Tensor::from_parts(x.shape().to_vec(), out))?;
            }
            &Op::Sum(a) => {
                acc(a, Tensor::full(val(a).shape(), g.item()))?;
            }
            &Op::SumLast(a) => {
                let x = val(a);
                let c = x.last_dim();
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                acc(a, Tensor::from_parts(x.shape().to_vec(), data))?;
            }
            &Op::Reshape(a) => {
                acc(a, g.reshape(val(a).shape())?)?;
            }
            &Op::SliceLast { a, start } => {
                let x = val(a);
                let c = x.last_dim();
                let w = g.last_dim();
                let mut out = vec![0.0; x.numel()];
                for r in 0..x.rows() {
                    out[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                acc(a, Tensor::from_parts(x.shape().to_vec(), out))?;
            }
            &Op::ConcatLast(a, b) => {
                let (x, y) = (val(a), val(b));
                let (ca, cb) = (x.last_dim(), y.last_dim());
                let mut ga = Vec::with_capacity(x.numel());
                let mut gb = Vec::with_capacity(y.numel());
                for r in 0..x.rows() {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..ca + cb]);
                }
                acc(a, Tensor::from_parts(x.shape().to_vec(), ga))?;
                acc(b, Tensor::from_parts(y.shape().to_vec(), gb))?;
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut out = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in out[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, Tensor::from_parts(t.shape().to_vec(), out))?;
            }
        }
        Ok(())
    }
}

fn row_op(x: &Tensor, row: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let c = x.last_dim();
    if row.numel() != c || row.rank() != 1 {
        return shape_err(op, x.shape(), row.shape());
    }
    let r = row.data();
    let data: Vec<f64> = x
        .data()
        .chunks(c)
        .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>())
        .collect();
    Tensor::new(x.shape().to_vec(), data).map_err(|_| Error::NonFinite(op))
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.last_dim();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::full(shape, g.sum())
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = y.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
            for j in 0..len {
                let k = base + j * inner;
                out[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
