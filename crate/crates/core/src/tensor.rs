//! Dense `f64` tensors and a reverse-mode differentiation record.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation on a [`Var`]
//! appends one node holding the forward value; parents always precede their
//! children, so [`Tape::backward`] is a single reverse sweep over the list.
//! Values that do not depend on any parameter are stored as constants and
//! skipped by the sweep.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};

/// Rows whose Euclidean norm is below this are left untouched by
/// [`Var::l2_normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-12;

const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("{shape:?} (rank must be 1..={MAX_RANK}, dims positive)"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count when viewed as a matrix (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn transposed(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    fn matmul_raw(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Sums the rows of a matrix into a `[1 x cols]` tensor.
    fn column_sums(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![1, c],
            data: out,
        }
    }
}

/// Operation kinds understood by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    Transpose,
    Relu,
    Exp,
    Log,
    Pow(f64),
    ClampMin(f64),
    Sum,
    Mean,
    ConcatRows,
    L2NormalizeRows,
    SoftmaxRows,
    LogSoftmaxRows,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum NodeKind {
    Leaf,
    Op(Op),
}

struct Node {
    kind: NodeKind,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// `Add`, `Sub`, `Mul` with a `[1 x n]` right operand broadcast over rows.
    broadcast: bool,
}

/// The differentiation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Registers a constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            kind: NodeKind::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
            broadcast: false,
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape) && v.id < self.len()
    }

    /// Applies `op` to `inputs`, recording the result.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            if !self.owns(*v) {
                return Err(Error::ForeignNode(v.id));
            }
        }
        let arity = match op {
            Op::Add | Op::Sub | Op::Mul | Op::Matmul => 2,
            Op::ConcatRows => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{op:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        let (value, broadcast) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            forward(op, &vals)?
        };
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(Node {
            kind: NodeKind::Op(op),
            parents: inputs.iter().map(|v| v.id).collect(),
            value,
            requires_grad,
            broadcast,
        }))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !self.owns(output) {
            return Err(Error::ForeignNode(output.id));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::NotScalar(out.value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::filled(&out.value.shape, 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let NodeKind::Op(op) = node.kind else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pg = backward_op(op, node, &parent_vals, &g);
            for (&p, pgrad) in node.parents.iter().zip(pg) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pgrad),
                    slot @ None => *slot = Some(pgrad),
                }
            }
        }
        let shapes = nodes[..=output.id]
            .iter()
            .map(|n| n.value.shape.clone())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a scalar with respect to the leaves of a record.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros of matching shape if `v` did not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id) {
            Some(Some(g)) => g.clone(),
            _ => {
                let shape = self.shapes.get(v.id).cloned().unwrap_or_else(|| v.shape());
                Tensor::zeros(&shape)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op) -> Result<Var<'t>> {
        self.tape.apply(op, &[self])
    }

    fn binary(self, op: Op, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(op, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, rhs)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Matmul, rhs)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(c))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Op::Log)
    }

    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        self.unary(Op::Pow(p))
    }

    pub fn clamp_min(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::ClampMin(c))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Op::Mean)
    }

    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        self.unary(Op::L2NormalizeRows)
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.unary(Op::SoftmaxRows)
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        self.unary(Op::LogSoftmaxRows)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        first.tape.apply(Op::ConcatRows, parts)
    }
}

fn shapes_str(vals: &[&Tensor]) -> String {
    vals.iter()
        .map(|t| format!("{:?}", t.shape))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn elementwise_compat(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape == b.shape {
        return Ok(false);
    }
    if a.is_matrix() && b.shape == [1, a.shape[1]] {
        return Ok(true);
    }
    Err(Error::shape(op, shapes_str(&[a, b])))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, bc: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if !bc {
        return a.zip(b, f);
    }
    let c = a.cols();
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % c]))
            .collect(),
    }
}

fn row_op(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; t.numel()];
    for (src, dst) in t.data.chunks(c).zip(out.chunks_mut(c)) {
        f(src, dst);
    }
    Tensor {
        shape: t.shape.clone(),
        data: out,
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

fn forward(op: Op, vals: &[&Tensor]) -> Result<(Tensor, bool)> {
    let x = vals[0];
    let out = match op {
        Op::Add | Op::Sub | Op::Mul => {
            let name = match op {
                Op::Add => "add",
                Op::Sub => "sub",
                _ => "mul",
            };
            let bc = elementwise_compat(name, x, vals[1])?;
            let t = match op {
                Op::Add => broadcast_zip(x, vals[1], bc, |a, b| a + b),
                Op::Sub => broadcast_zip(x, vals[1], bc, |a, b| a - b),
                _ => broadcast_zip(x, vals[1], bc, |a, b| a * b),
            };
            return Ok((t, bc));
        }
        Op::Scale(c) => x.map(|v| v * c),
        Op::AddScalar(c) => x.map(|v| v + c),
        Op::Matmul => {
            let b = vals[1];
            if !x.is_matrix() || !b.is_matrix() || x.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", shapes_str(vals)));
            }
            x.matmul_raw(b)
        }
        Op::Transpose => {
            if !x.is_matrix() {
                return Err(Error::shape("transpose", shapes_str(vals)));
            }
            x.transposed()
        }
        Op::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Exp => x.map(f64::exp),
        Op::Log => {
            if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
            x.map(f64::ln)
        }
        Op::Pow(p) => {
            if p.fract() != 0.0 {
                if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "pow",
                        detail: format!("non-positive base {bad} with exponent {p}"),
                    });
                }
            }
            x.map(|v| v.powf(p))
        }
        Op::ClampMin(c) => x.map(|v| v.max(c)),
        Op::Sum => Tensor::scalar(x.data.iter().sum()),
        Op::Mean => Tensor::scalar(x.data.iter().sum::<f64>() / x.numel() as f64),
        Op::ConcatRows => {
            let c = x.cols();
            if vals.iter().any(|t| t.shape.len() > 2 || t.cols() != c) {
                return Err(Error::shape("concat_rows", shapes_str(vals)));
            }
            let rows: usize = vals.iter().map(|t| t.rows()).sum();
            let data = vals.iter().flat_map(|t| t.data.iter().copied()).collect();
            Tensor {
                shape: vec![rows, c],
                data,
            }
        }
        Op::L2NormalizeRows => row_op(x, |src, dst| {
            let n = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if n < NORMALIZE_EPS { 1.0 } else { 1.0 / n };
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * inv;
            }
        }),
        Op::SoftmaxRows => row_op(x, softmax_row),
        Op::LogSoftmaxRows => row_op(x, |src, dst| {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }),
    };
    Ok((out, false))
}

fn backward_op(op: Op, node: &Node, inputs: &[&Tensor], g: &Tensor) -> Vec<Tensor> {
    let x = inputs[0];
    let y = &node.value;
    let reduce = |t: Tensor| if node.broadcast { t.column_sums() } else { t };
    match op {
        Op::Add => vec![g.clone(), reduce(g.clone())],
        Op::Sub => vec![g.clone(), reduce(g.map(|v| -v))],
        Op::Mul => {
            let b = inputs[1];
            let ga = broadcast_zip(g, b, node.broadcast, |gv, bv| gv * bv);
            let gb = reduce(g.zip(x, |gv, av| gv * av));
            vec![ga, gb]
        }
        Op::Scale(c) => vec![g.map(|v| v * c)],
        Op::AddScalar(_) => vec![g.clone()],
        Op::Matmul => {
            let b = inputs[1];
            vec![g.matmul_raw(&b.transposed()), x.transposed().matmul_raw(g)]
        }
        Op::Transpose => vec![g.transposed()],
        Op::Relu => vec![g.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })],
        Op::Exp => vec![g.zip(y, |gv, yv| gv * yv)],
        Op::Log => vec![g.zip(x, |gv, xv| gv / xv)],
        Op::Pow(p) => vec![g.zip(x, |gv, xv| gv * p * xv.powf(p - 1.0))],
        Op::ClampMin(c) => vec![g.zip(x, |gv, xv| if xv > c { gv } else { 0.0 })],
        Op::Sum => vec![Tensor::filled(&x.shape, g.data[0])],
        Op::Mean => vec![Tensor::filled(&x.shape, g.data[0] / x.numel() as f64)],
        Op::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let n = t.numel();
                    let part = Tensor {
                        shape: t.shape.clone(),
                        data: g.data[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    part
                })
                .collect()
        }
        Op::L2NormalizeRows => {
            let c = x.cols();
            let mut out = vec![0.0; x.numel()];
            for r in 0..x.rows() {
                let xs = &x.data[r * c..(r + 1) * c];
                let ys = &y.data[r * c..(r + 1) * c];
                let gs = &g.data[r * c..(r + 1) * c];
                let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dst = &mut out[r * c..(r + 1) * c];
                if n < NORMALIZE_EPS {
                    dst.copy_from_slice(gs);
                    continue;
                }
                let yg: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
                    *d = (gv - yv * yg) / n;
                }
            }
            vec![Tensor {
                shape: x.shape.clone(),
                data: out,
            }]
        }
        Op::SoftmaxRows => {
            let c = x.cols();
            let mut out = vec![0.0; x.numel()];
            for r in 0..x.rows() {
                let ys = &y.data[r * c..(r + 1) * c];
                let gs = &g.data[r * c..(r + 1) * c];
                let yg: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in out[r * c..(r + 1) * c].iter_mut().zip(ys).zip(gs) {
                    *d = yv * (gv - yg);
                }
            }
            vec![Tensor {
                shape: x.shape.clone(),
                data: out,
            }]
        }
        Op::LogSoftmaxRows => {
            let c = x.cols();
            let mut out = vec![0.0; x.numel()];
            for r in 0..x.rows() {
                let ys = &y.data[r * c..(r + 1) * c];
                let gs = &g.data[r * c..(r + 1) * c];
                let gsum: f64 = gs.iter().sum();
                for ((d, &yv), &gv) in out[r * c..(r + 1) * c].iter_mut().zip(ys).zip(gs) {
                    *d = gv - yv.exp() * gsum;
                }
            }
            vec![Tensor {
                shape: x.shape.clone(),
                data: out,
            }]
        }
    }
}

/// Softmax over each row of an untracked tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    row_op(t, softmax_row)
}
