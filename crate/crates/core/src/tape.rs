//! Reverse-mode differentiation over an append-only record of primitive
//! applications.
//!
//! Nodes are pushed in evaluation order, so the record is topologically
//! sorted by construction and the backward sweep is a single reverse scan.

use std::f64::consts::{LN_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{gemm, matrix_dims, Tensor};

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives.
///
/// Elementwise binary ops broadcast any unit dimension of the matrix view,
/// which covers both row-vector biases and scalar operands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Log,
    Tanh,
    Square,
    Neg,
    /// Sum of all entries, giving a rank-0 tensor.
    Sum,
    /// Sum along one axis of the tensor, keeping the reduced axis as size 1.
    SumAxis(usize),
    Mean,
    /// Log-sum-exp along one axis, keeping the reduced axis as size 1.
    LogSumExp(usize),
    /// Concatenation of rank-2 inputs along an axis.
    Concat(usize),
    /// Contiguous column range `start..end` of a rank-2 input.
    SliceCols { start: usize, end: usize },
    Scale(f64),
    Clamp { lo: f64, hi: f64 },
    /// Elementwise `ln cosh(x)`, overflow-safe.
    LogCosh,
    /// `out[i, j] = sum_d ln N(z[i, d]; mean[j, d], exp(logvar[j, d]))` for
    /// inputs `(z, mean, logvar)`; the all-pairs kernel behind aggregated
    /// posterior estimates.
    PairwiseGaussianLogpdf,
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::MatMul => "matmul",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Square => "square",
            Primitive::Neg => "negate",
            Primitive::Sum => "sum",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::Mean => "mean",
            Primitive::LogSumExp(_) => "logsumexp",
            Primitive::Concat(_) => "concat",
            Primitive::SliceCols { .. } => "slice",
            Primitive::Scale(_) => "scale",
            Primitive::Clamp { .. } => "clamp",
            Primitive::LogCosh => "logcosh",
            Primitive::PairwiseGaussianLogpdf => "pairwise_gaussian_logpdf",
        }
    }

    fn arity(self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
            Primitive::PairwiseGaussianLogpdf => Some(3),
            Primitive::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Origin {
    Param,
    Constant,
    Op(Primitive),
}

#[derive(Debug)]
struct Node {
    origin: Origin,
    inputs: Vec<Var>,
    value: Tensor,
    saved: Option<Tensor>,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that reached it.
/// Parameter leaves always have an entry (zeros when unreached).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("gradient requested for a non-parameter node")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Origin::Param, vec![], value, None, true)
    }

    /// Leaf treated as fixed data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Origin::Constant, vec![], value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        origin: Origin,
        inputs: Vec<Var>,
        value: Tensor,
        saved: Option<Tensor>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node { origin, inputs, value, saved, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on recorded inputs and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} takes {} inputs, got {}",
                    op.name(),
                    n,
                    inputs.len()
                )));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Origin::Op(op), inputs.to_vec(), value, saved, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Neg, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSumExp(axis), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, end }, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }
    pub fn logcosh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogCosh, &[a])
    }
    pub fn pairwise_gaussian_logpdf(&mut self, z: Var, mean: Var, logvar: Var) -> Result<Var> {
        self.apply(Primitive::PairwiseGaussianLogpdf, &[z, mean, logvar])
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(Error::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out_node.value.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Origin::Op(op) = node.origin else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Node> = node.inputs.iter().map(|v| &self.nodes[v.0]).collect();
            let needs: Vec<bool> = inputs.iter().map(|n| n.requires_grad).collect();
            let contributions = vjp(op, &inputs, node, &g, &needs);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    accumulate(&mut grads[input.0], c);
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.origin, Origin::Param) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn dims(op: Primitive, t: &Tensor) -> Result<(usize, usize)> {
    matrix_dims(t.shape()).ok_or_else(|| Error::shape(op.name(), &[t.shape()]))
}

fn broadcast_dims(op: Primitive, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = dims(op, a)?;
    let (rb, cb) = dims(op, b)?;
    let pick = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (pick(ra, rb), pick(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(op.name(), &[a.shape(), b.shape()])),
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, r: usize, c: usize) -> Vec<usize> {
    if a.shape() == b.shape() {
        a.shape().to_vec()
    } else if a.len() == r * c {
        a.shape().to_vec()
    } else if b.len() == r * c {
        b.shape().to_vec()
    } else {
        vec![r, c]
    }
}

/// Reads `t` at output position `(i, j)` under unit-dimension broadcasting.
#[inline]
fn bget(t: &Tensor, tr: usize, tc: usize, i: usize, j: usize) -> f64 {
    let ii = if tr == 1 { 0 } else { i };
    let jj = if tc == 1 { 0 } else { j };
    t.data()[ii * tc + jj]
}

fn binary(op: Primitive, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = broadcast_dims(op, a, b)?;
    let shape = broadcast_shape(a, b, r, c);
    if a.len() == b.len() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(shape, data));
    }
    let (ra, ca) = matrix_dims(a.shape()).unwrap();
    let (rb, cb) = matrix_dims(b.shape()).unwrap();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(bget(a, ra, ca, i, j), bget(b, rb, cb, i, j)));
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Sums an output-shaped gradient down to the shape of a broadcast operand.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        return Tensor::from_parts(target.shape().to_vec(), g.data().to_vec());
    }
    let (r, c) = matrix_dims(g.shape()).unwrap();
    let (tr, tc) = matrix_dims(target.shape()).unwrap();
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        for j in 0..c {
            let ii = if tr == 1 { 0 } else { i };
            let jj = if tc == 1 { 0 } else { j };
            out[ii * tc + jj] += g.data()[i * c + j];
        }
    }
    Tensor::from_parts(target.shape().to_vec(), out)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

/// Visits `(outer, inner)` index pairs for a reduction over `axis` of a
/// rank-1 or rank-2 tensor; returns (number of lanes, lane length, stride
/// between lane elements, stride between lane starts).
fn lanes(op: Primitive, t: &Tensor, axis: usize) -> Result<(usize, usize, usize, usize)> {
    match (t.shape().len(), axis) {
        (1, 0) => Ok((1, t.shape()[0], 1, 0)),
        (2, 1) => Ok((t.shape()[0], t.shape()[1], 1, t.shape()[1])),
        (2, 0) => Ok((t.shape()[1], t.shape()[0], t.shape()[1], 1)),
        _ => Err(Error::invalid(format!(
            "{}: axis {} invalid for shape {:?}",
            op.name(),
            axis,
            t.shape()
        ))),
    }
}

#[inline]
fn logcosh_value(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

fn forward(op: Primitive, x: &[&Tensor]) -> Result<(Tensor, Option<Tensor>)> {
    let unary = |f: fn(f64) -> f64| -> Result<(Tensor, Option<Tensor>)> {
        dims(op, x[0])?;
        Ok((x[0].map(f), None))
    };
    match op {
        Primitive::Add => Ok((binary(op, x[0], x[1], |a, b| a + b)?, None)),
        Primitive::Sub => Ok((binary(op, x[0], x[1], |a, b| a - b)?, None)),
        Primitive::Mul => Ok((binary(op, x[0], x[1], |a, b| a * b)?, None)),
        Primitive::MatMul => {
            let (m, k) = dims(op, x[0])?;
            let (k2, n) = dims(op, x[1])?;
            if k != k2 || x[0].shape().len() != 2 || x[1].shape().len() != 2 {
                return Err(Error::shape(op.name(), &[x[0].shape(), x[1].shape()]));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x[0].data(), false, x[1].data(), false, &mut out, 0.0);
            Ok((Tensor::from_parts(vec![m, n], out), None))
        }
        Primitive::Exp => unary(f64::exp),
        Primitive::Log => unary(f64::ln),
        Primitive::Tanh => unary(f64::tanh),
        Primitive::Square => unary(|v| v * v),
        Primitive::Neg => unary(|v| -v),
        Primitive::LogCosh => unary(logcosh_value),
        Primitive::Scale(c) => {
            dims(op, x[0])?;
            Ok((x[0].map(|v| v * c), None))
        }
        Primitive::Clamp { lo, hi } => {
            dims(op, x[0])?;
            Ok((x[0].map(|v| v.clamp(lo, hi)), None))
        }
        Primitive::Sum => {
            dims(op, x[0])?;
            Ok((Tensor::scalar(x[0].data().iter().sum()), None))
        }
        Primitive::Mean => {
            dims(op, x[0])?;
            let n = x[0].len().max(1) as f64;
            Ok((Tensor::scalar(x[0].data().iter().sum::<f64>() / n), None))
        }
        Primitive::SumAxis(axis) => {
            let (count, len, step, stride) = lanes(op, x[0], axis)?;
            let d = x[0].data();
            let out = (0..count)
                .map(|l| (0..len).map(|e| d[l * stride + e * step]).sum())
                .collect();
            Ok((Tensor::from_parts(reduced_shape(x[0].shape(), axis), out), None))
        }
        Primitive::LogSumExp(axis) => {
            let (count, len, step, stride) = lanes(op, x[0], axis)?;
            let d = x[0].data();
            let mut out = Vec::with_capacity(count);
            let mut weights = vec![0.0; d.len()];
            for l in 0..count {
                let at = |e: usize| l * stride + e * step;
                let max = (0..len).map(|e| d[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    out.push(f64::NEG_INFINITY);
                    continue;
                }
                let mut s = 0.0;
                for e in 0..len {
                    let w = (d[at(e)] - max).exp();
                    weights[at(e)] = w;
                    s += w;
                }
                for e in 0..len {
                    weights[at(e)] /= s;
                }
                out.push(max + s.ln());
            }
            let shape = reduced_shape(x[0].shape(), axis);
            Ok((
                Tensor::from_parts(shape, out),
                Some(Tensor::from_parts(x[0].shape().to_vec(), weights)),
            ))
        }
        Primitive::Concat(axis) => {
            if x.is_empty() || x.iter().any(|t| t.shape().len() != 2) || axis > 1 {
                let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
                return Err(Error::shape(op.name(), &shapes));
            }
            let rows = x[0].rows();
            let cols = x[0].cols();
            if axis == 1 {
                if x.iter().any(|t| t.rows() != rows) {
                    let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
                    return Err(Error::shape(op.name(), &shapes));
                }
                let total: usize = x.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for t in x {
                        out.extend_from_slice(t.row(r));
                    }
                }
                Ok((Tensor::from_parts(vec![rows, total], out), None))
            } else {
                if x.iter().any(|t| t.cols() != cols) {
                    let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
                    return Err(Error::shape(op.name(), &shapes));
                }
                let total: usize = x.iter().map(|t| t.rows()).sum();
                let mut out = Vec::with_capacity(total * cols);
                for t in x {
                    out.extend_from_slice(t.data());
                }
                Ok((Tensor::from_parts(vec![total, cols], out), None))
            }
        }
        Primitive::SliceCols { start, end } => {
            if x[0].shape().len() != 2 || start >= end || end > x[0].cols() {
                return Err(Error::shape(op.name(), &[x[0].shape()]));
            }
            Ok((x[0].columns(start, end), None))
        }
        Primitive::PairwiseGaussianLogpdf => {
            let (z, mean, logvar) = (x[0], x[1], x[2]);
            let ok = z.shape().len() == 2
                && mean.shape().len() == 2
                && mean.shape() == logvar.shape()
                && z.cols() == mean.cols();
            if !ok {
                return Err(Error::shape(op.name(), &[z.shape(), mean.shape(), logvar.shape()]));
            }
            let (m, k) = (z.rows(), z.cols());
            let p = mean.rows();
            let inv_var: Vec<f64> = logvar.data().iter().map(|lv| (-lv).exp()).collect();
            let half_log_2pi = 0.5 * (2.0 * PI).ln();
            let offsets: Vec<f64> = (0..p)
                .map(|j| {
                    -(k as f64) * half_log_2pi - 0.5 * logvar.row(j).iter().sum::<f64>()
                })
                .collect();
            let mut out = vec![0.0; m * p];
            let (zd, md) = (z.data(), mean.data());
            for i in 0..m {
                let zi = &zd[i * k..(i + 1) * k];
                let row = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    let mj = &md[j * k..(j + 1) * k];
                    let ivj = &inv_var[j * k..(j + 1) * k];
                    let mut q = 0.0;
                    for d in 0..k {
                        let diff = zi[d] - mj[d];
                        q += diff * diff * ivj[d];
                    }
                    row[j] = offsets[j] - 0.5 * q;
                }
            }
            Ok((Tensor::from_parts(vec![m, p], out), None))
        }
    }
}

/// Vector-Jacobian products for each input of `node`, skipping inputs that
/// do not require gradients.
fn vjp(op: Primitive, inputs: &[&Node], node: &Node, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let x = |i: usize| &inputs[i].value;
    let y = &node.value;
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Tensor {
        let data = (0..g.len()).map(f).collect();
        Tensor::from_parts(x(0).shape().to_vec(), data)
    };
    match op {
        Primitive::Add => vec![
            needs[0].then(|| reduce_to(g, x(0))),
            needs[1].then(|| reduce_to(g, x(1))),
        ],
        Primitive::Sub => vec![
            needs[0].then(|| reduce_to(g, x(0))),
            needs[1].then(|| reduce_to(&g.map(|v| -v), x(1))),
        ],
        Primitive::Mul => {
            let (r, c) = matrix_dims(g.shape()).unwrap();
            let scaled_by = |other: &Tensor| {
                let (or, oc) = matrix_dims(other.shape()).unwrap();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        data.push(g.data()[i * c + j] * bget(other, or, oc, i, j));
                    }
                }
                Tensor::from_parts(g.shape().to_vec(), data)
            };
            vec![
                needs[0].then(|| reduce_to(&scaled_by(x(1)), x(0))),
                needs[1].then(|| reduce_to(&scaled_by(x(0)), x(1))),
            ]
        }
        Primitive::MatMul => {
            let (m, k) = (x(0).rows(), x(0).cols());
            let n = x(1).cols();
            let ga = needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, x(1).data(), true, &mut out, 0.0);
                Tensor::from_parts(vec![m, k], out)
            });
            let gb = needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, x(0).data(), true, g.data(), false, &mut out, 0.0);
                Tensor::from_parts(vec![k, n], out)
            });
            vec![ga, gb]
        }
        Primitive::Exp => vec![Some(elementwise(&|i| g.data()[i] * y.data()[i]))],
        Primitive::Log => vec![Some(elementwise(&|i| g.data()[i] / x(0).data()[i]))],
        Primitive::Tanh => vec![Some(elementwise(&|i| {
            let t = y.data()[i];
            g.data()[i] * (1.0 - t * t)
        }))],
        Primitive::Square => vec![Some(elementwise(&|i| 2.0 * g.data()[i] * x(0).data()[i]))],
        Primitive::Neg => vec![Some(elementwise(&|i| -g.data()[i]))],
        Primitive::LogCosh => vec![Some(elementwise(&|i| g.data()[i] * x(0).data()[i].tanh()))],
        Primitive::Scale(c) => vec![Some(elementwise(&|i| c * g.data()[i]))],
        Primitive::Clamp { lo, hi } => vec![Some(elementwise(&|i| {
            let v = x(0).data()[i];
            if (lo..=hi).contains(&v) {
                g.data()[i]
            } else {
                0.0
            }
        }))],
        Primitive::Sum => {
            let s = g.item();
            vec![Some(Tensor::filled(x(0).shape(), s))]
        }
        Primitive::Mean => {
            let s = g.item() / x(0).len().max(1) as f64;
            vec![Some(Tensor::filled(x(0).shape(), s))]
        }
        Primitive::SumAxis(axis) => {
            let (count, len, step, stride) = lanes(op, x(0), axis).unwrap();
            let mut out = vec![0.0; x(0).len()];
            for l in 0..count {
                for e in 0..len {
                    out[l * stride + e * step] = g.data()[l];
                }
            }
            vec![Some(Tensor::from_parts(x(0).shape().to_vec(), out))]
        }
        Primitive::LogSumExp(axis) => {
            let weights = node.saved.as_ref().expect("logsumexp saves its weights");
            let (count, len, step, stride) = lanes(op, x(0), axis).unwrap();
            let mut out = vec![0.0; x(0).len()];
            for l in 0..count {
                let gl = g.data()[l];
                for e in 0..len {
                    let at = l * stride + e * step;
                    out[at] = gl * weights.data()[at];
                }
            }
            vec![Some(Tensor::from_parts(x(0).shape().to_vec(), out))]
        }
        Primitive::Concat(axis) => {
            let mut parts = Vec::with_capacity(inputs.len());
            if axis == 1 {
                let mut offset = 0;
                for (i, inp) in inputs.iter().enumerate() {
                    let w = inp.value.cols();
                    parts.push(needs[i].then(|| g.columns(offset, offset + w)));
                    offset += w;
                }
            } else {
                let cols = g.cols();
                let mut offset = 0;
                for (i, inp) in inputs.iter().enumerate() {
                    let n = inp.value.len();
                    parts.push(needs[i].then(|| {
                        Tensor::from_parts(
                            vec![inp.value.rows(), cols],
                            g.data()[offset..offset + n].to_vec(),
                        )
                    }));
                    offset += n;
                }
            }
            parts
        }
        Primitive::SliceCols { start, end } => {
            let (rows, cols) = (x(0).rows(), x(0).cols());
            let w = end - start;
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                out[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::from_parts(x(0).shape().to_vec(), out))]
        }
        Primitive::PairwiseGaussianLogpdf => {
            let (z, mean, logvar) = (x(0), x(1), x(2));
            let (m, k) = (z.rows(), z.cols());
            let p = mean.rows();
            let inv_var: Vec<f64> = logvar.data().iter().map(|lv| (-lv).exp()).collect();
            let mut dz = vec![0.0; m * k];
            let mut dmean = vec![0.0; p * k];
            let mut dlogvar = vec![0.0; p * k];
            let (zd, md, gd) = (z.data(), mean.data(), g.data());
            for i in 0..m {
                let zi = &zd[i * k..(i + 1) * k];
                for j in 0..p {
                    let gij = gd[i * p + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for d in 0..k {
                        let iv = inv_var[j * k + d];
                        let diff = zi[d] - md[j * k + d];
                        let t = gij * diff * iv;
                        dz[i * k + d] -= t;
                        dmean[j * k + d] += t;
                        dlogvar[j * k + d] += 0.5 * gij * (diff * diff * iv - 1.0);
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(z.shape().to_vec(), dz)),
                needs[1].then(|| Tensor::from_parts(mean.shape().to_vec(), dmean)),
                needs[2].then(|| Tensor::from_parts(logvar.shape().to_vec(), dlogvar)),
            ]
        }
    }
}

/// Largest relative disagreement between the recorded gradient of `f` and
/// central differences with step `h`, over every coordinate of `params`.
///
/// Relative error is `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn check_gradients<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient-check objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (b, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[b]);
        for i in 0..p.len() {
            let orig = p.data()[i];
            work[b].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[b].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[b].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
