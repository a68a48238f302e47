//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the op, its input node ids, and the computed value. [`Tape::backward`]
//! replays the trace in exact reverse record order and accumulates gradients;
//! it never mutates the tape, so repeated calls give identical results.
//! Every op checks its output and aborts the forward pass on the first
//! non-finite value.

pub mod check;
pub mod kernels;

use crate::error::{Error, Result};

pub use kernels::{parallel_enabled, set_parallel};

pub type NodeId = usize;

// ── Tensor ───────────────────────────────────────────────────────────────

/// Dense row-major f64 tensor. By convention the batch axis comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(v: &[f64]) -> Tensor {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(&[rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all axes except the last: the number of "rows".
    pub fn leading(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

// ── Free math helpers ────────────────────────────────────────────────────

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Normal probability density at `x` for the given mean and variance.
pub fn gaussian_density(x: f64, mean: f64, variance: f64) -> Result<f64> {
    if variance <= 0.0 {
        return Err(Error::Domain {
            op: "gaussian_density",
            msg: format!("variance must be positive, got {variance}"),
        });
    }
    let d = x - mean;
    Ok((-d * d / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt())
}

// ── Ops ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnKind {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Softplus,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Bin { kind: BinKind, a: NodeId, b: NodeId },
    Un { kind: UnKind, x: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    AddConst { x: NodeId },
    MulConst { x: NodeId, c: f64 },
    Scale { x: NodeId, s: NodeId },
    Concat { parts: Vec<NodeId> },
    Slice { x: NodeId, offset: usize, len: usize },
    Softmax { x: NodeId },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    GaussianWeights { mu: NodeId, var: NodeId, positions: usize },
    MixRows { weights: NodeId, values: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Bin { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::Un { kind, .. } => match kind {
                UnKind::Sigmoid => "sigmoid",
                UnKind::Tanh => "tanh",
                UnKind::Exp => "exp",
                UnKind::Log => "log",
                UnKind::Sqrt => "sqrt",
                UnKind::Softplus => "softplus",
            },
            Op::AddBias { .. } => "add_bias",
            Op::AddConst { .. } => "add_const",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax { .. } => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GaussianWeights { .. } => "gaussian_weights",
            Op::MixRows { .. } => "mix_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

// ── Tape ─────────────────────────────────────────────────────────────────

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if let Some(index) = kernels::first_nonfinite(value.data()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    /// Record an input or parameter tensor. Leaves are not checked for
    /// finiteness; a bad leaf surfaces at the first op that consumes it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        self.nodes.len() - 1
    }

    /// C = A · B for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = kernels::matmul(va.data(), vb.data(), m, k, n);
        let value = Tensor::from_vec(&[m, n], out)?;
        self.push(Op::Matmul { a, b }, value)
    }

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let op = Op::Bin { kind, a, b };
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: op.name(),
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        if kind == BinKind::Div {
            if let Some(i) = vb.data().iter().position(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    msg: format!("zero divisor at flat index {i}"),
                });
            }
        }
        let data = match kind {
            BinKind::Add => kernels::binary_map(va.data(), vb.data(), |x, y| x + y),
            BinKind::Sub => kernels::binary_map(va.data(), vb.data(), |x, y| x - y),
            BinKind::Mul => kernels::binary_map(va.data(), vb.data(), |x, y| x * y),
            BinKind::Div => kernels::binary_map(va.data(), vb.data(), |x, y| x / y),
        };
        let value = Tensor::from_vec(va.shape(), data)?;
        self.push(op, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Div, a, b)
    }

    fn un(&mut self, kind: UnKind, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        match kind {
            UnKind::Log => {
                if let Some(i) = vx.data().iter().position(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive operand at flat index {i}"),
                    });
                }
            }
            UnKind::Sqrt => {
                if let Some(i) = vx.data().iter().position(|&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        msg: format!("negative operand at flat index {i}"),
                    });
                }
            }
            _ => {}
        }
        let data = match kind {
            UnKind::Sigmoid => kernels::unary_map(vx.data(), sigmoid),
            UnKind::Tanh => kernels::unary_map(vx.data(), f64::tanh),
            UnKind::Exp => kernels::unary_map(vx.data(), f64::exp),
            UnKind::Log => kernels::unary_map(vx.data(), f64::ln),
            UnKind::Sqrt => kernels::unary_map(vx.data(), f64::sqrt),
            UnKind::Softplus => kernels::unary_map(vx.data(), softplus),
        };
        let value = Tensor::from_vec(vx.shape(), data)?;
        self.push(Op::Un { kind, x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.un(UnKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.un(UnKind::Tanh, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.un(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.un(UnKind::Log, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.un(UnKind::Sqrt, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.un(UnKind::Softplus, x)
    }

    /// x[m×n] + bias[n], broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.rank() != 1 || vb.shape()[0] != vx.shape()[1] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = vx.shape()[1];
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data)?;
        self.push(Op::AddBias { x, bias }, value)
    }

    /// x + c elementwise for a plain constant (not a differentiable input).
    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let value = Tensor::from_vec(vx.shape(), kernels::unary_map(vx.data(), |v| v + c))?;
        self.push(Op::AddConst { x }, value)
    }

    /// c · x elementwise for a plain constant.
    pub fn mul_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let value = Tensor::from_vec(vx.shape(), kernels::unary_map(vx.data(), |v| v * c))?;
        self.push(Op::MulConst { x, c }, value)
    }

    /// x scaled by a differentiable one-element tensor.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.numel() != 1 {
            return Err(Error::Dimension {
                op: "scale",
                lhs: vx.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let sv = vs.data()[0];
        let value = Tensor::from_vec(vx.shape(), kernels::unary_map(vx.data(), |v| v * sv))?;
        self.push(Op::Scale { x, s }, value)
    }

    /// Concatenate along the last axis. All parts must agree on every other
    /// axis. Boundaries are recoverable via [`Tape::concat_bounds`].
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of zero parts".into()));
        }
        let lead_shape = {
            let first = self.value(parts[0]).shape();
            first[..first.len() - 1].to_vec()
        };
        let mut last_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            last_total += s[s.len() - 1];
        }
        let rows: usize = lead_shape.iter().product::<usize>().max(1);
        let mut data = vec![0.0; rows * last_total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.last_dim();
            for r in 0..rows {
                data[r * last_total + offset..r * last_total + offset + w]
                    .copy_from_slice(&v.data()[r * w..r * w + w]);
            }
            offset += w;
        }
        let mut shape = lead_shape;
        shape.push(last_total);
        let value = Tensor::from_vec(&shape, data)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    /// (offset, length) of each part of a concat node along its last axis.
    pub fn concat_bounds(&self, id: NodeId) -> Option<Vec<(usize, usize)>> {
        match &self.nodes[id].op {
            Op::Concat { parts } => {
                let mut bounds = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    bounds.push((offset, w));
                    offset += w;
                }
                Some(bounds)
            }
            _ => None,
        }
    }

    /// Contiguous slice `[offset, offset+len)` of the last axis.
    pub fn slice(&mut self, x: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let last = vx.last_dim();
        if len == 0 || offset + len > last {
            return Err(Error::Argument(format!(
                "slice [{offset}, {}) out of bounds for last axis {last}",
                offset + len
            )));
        }
        let rows = vx.leading();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..r * len + len]
                .copy_from_slice(&vx.data()[r * last + offset..r * last + offset + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&shape, data)?;
        self.push(Op::Slice { x, offset, len }, value)
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data)?;
        self.push(Op::Softmax { x }, value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: vx.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape, vx.data().to_vec())?;
        self.push(Op::Reshape { x }, value)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    /// Mean softmax cross-entropy of logits[rows × classes] against integer
    /// targets, computed via a numerically stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rank() != 2 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, classes) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != rows {
            return Err(Error::Argument(format!(
                "cross_entropy: {rows} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Argument(format!(
                "cross_entropy: target {t} out of range for {classes} classes"
            )));
        }
        let mut total = 0.0;
        for (r, row) in vl.data().chunks(classes).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
        )
    }

    /// Gaussian densities over integer positions `1..=positions` for each
    /// (mean, variance) pair. Output shape is `mu.shape + [positions]`.
    pub fn gaussian_weights(&mut self, mu: NodeId, var: NodeId, positions: usize) -> Result<NodeId> {
        let (vm, vv) = (self.value(mu), self.value(var));
        if vm.shape() != vv.shape() {
            return Err(Error::Dimension {
                op: "gaussian_weights",
                lhs: vm.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        if positions == 0 {
            return Err(Error::Argument("gaussian_weights over zero positions".into()));
        }
        if let Some(i) = vv.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "gaussian_weights",
                msg: format!("non-positive variance at flat index {i}"),
            });
        }
        let mut data = vec![0.0; vm.numel() * positions];
        for (i, (&m, &v)) in vm.data().iter().zip(vv.data()).enumerate() {
            for p in 0..positions {
                data[i * positions + p] = gaussian_density((p + 1) as f64, m, v)?;
            }
        }
        let mut shape = vm.shape().to_vec();
        shape.push(positions);
        let value = Tensor::from_vec(&shape, data)?;
        self.push(Op::GaussianWeights { mu, var, positions }, value)
    }

    /// Batched mixture: out[b,c] = Σ_p weights[b,c,p] · values[b,p].
    pub fn mix_rows(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId> {
        let (vw, vv) = (self.value(weights), self.value(values));
        let ok = vw.rank() == 3
            && vv.rank() == 2
            && vw.shape()[0] == vv.shape()[0]
            && vw.shape()[2] == vv.shape()[1];
        if !ok {
            return Err(Error::Dimension {
                op: "mix_rows",
                lhs: vw.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let (batch, c, p) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        let mut data = vec![0.0; batch * c];
        for b in 0..batch {
            let vrow = &vv.data()[b * p..b * p + p];
            for j in 0..c {
                let wrow = &vw.data()[(b * c + j) * p..(b * c + j) * p + p];
                let mut s = 0.0;
                for q in 0..p {
                    s += wrow[q] * vrow[q];
                }
                data[b * c + j] = s;
            }
        }
        let value = Tensor::from_vec(&[batch, c], data)?;
        self.push(Op::MixRows { weights, values }, value)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Gradients of a one-element `loss` node with respect to every node on
    /// the tape. Pure: the tape is not modified, and ops are visited in the
    /// exact reverse of record order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a one-element loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<f64>>], node: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[node]
                .get_or_insert_with(|| vec![0.0; self.nodes[node].value.numel()]);
            f(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let da = kernels::matmul_nt(g, vb.data(), m, n, k);
                let db = kernels::matmul_tn(va.data(), g, m, k, n);
                acc(grads, *a, &mut |s| add_into(s, &da));
                acc(grads, *b, &mut |s| add_into(s, &db));
            }

            Op::Bin { kind, a, b } => match kind {
                BinKind::Add => {
                    acc(grads, *a, &mut |s| add_into(s, g));
                    acc(grads, *b, &mut |s| add_into(s, g));
                }
                BinKind::Sub => {
                    acc(grads, *a, &mut |s| add_into(s, g));
                    acc(grads, *b, &mut |s| sub_into(s, g));
                }
                BinKind::Mul => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    acc(grads, *a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * vb[i];
                        }
                    });
                    acc(grads, *b, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * va[i];
                        }
                    });
                }
                BinKind::Div => {
                    let vb = self.value(*b).data();
                    let vy = self.value(id).data();
                    acc(grads, *a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] / vb[i];
                        }
                    });
                    acc(grads, *b, &mut |s| {
                        for i in 0..s.len() {
                            s[i] -= g[i] * vy[i] / vb[i];
                        }
                    });
                }
            },

            Op::Un { kind, x } => {
                let vx = self.value(*x).data();
                let vy = self.value(id).data();
                acc(grads, *x, &mut |s| match kind {
                    UnKind::Sigmoid => {
                        for i in 0..s.len() {
                            s[i] += g[i] * vy[i] * (1.0 - vy[i]);
                        }
                    }
                    UnKind::Tanh => {
                        for i in 0..s.len() {
                            s[i] += g[i] * (1.0 - vy[i] * vy[i]);
                        }
                    }
                    UnKind::Exp => {
                        for i in 0..s.len() {
                            s[i] += g[i] * vy[i];
                        }
                    }
                    UnKind::Log => {
                        for i in 0..s.len() {
                            s[i] += g[i] / vx[i];
                        }
                    }
                    UnKind::Sqrt => {
                        for i in 0..s.len() {
                            s[i] += g[i] * 0.5 / vy[i];
                        }
                    }
                    UnKind::Softplus => {
                        for i in 0..s.len() {
                            s[i] += g[i] * sigmoid(vx[i]);
                        }
                    }
                });
            }

            Op::AddBias { x, bias } => {
                let n = self.value(*bias).numel();
                acc(grads, *x, &mut |s| add_into(s, g));
                acc(grads, *bias, &mut |s| {
                    // Rows reduced in ascending batch order.
                    for row in g.chunks(n) {
                        for (sv, gv) in s.iter_mut().zip(row) {
                            *sv += gv;
                        }
                    }
                });
            }

            Op::AddConst { x } => acc(grads, *x, &mut |s| add_into(s, g)),

            Op::MulConst { x, c } => {
                let c = *c;
                acc(grads, *x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += c * g[i];
                    }
                });
            }

            Op::Scale { x, s: sc } => {
                let sv = self.value(*sc).data()[0];
                let vx = self.value(*x).data();
                acc(grads, *x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += sv * g[i];
                    }
                });
                acc(grads, *sc, &mut |s| {
                    let mut total = 0.0;
                    for i in 0..vx.len() {
                        total += g[i] * vx[i];
                    }
                    s[0] += total;
                });
            }

            Op::Concat { parts } => {
                let total = self.value(id).last_dim();
                let rows = self.value(id).leading();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    acc(grads, p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }

            Op::Slice { x, offset, len } => {
                let last = self.value(*x).last_dim();
                let rows = self.value(*x).leading();
                let (offset, len) = (*offset, *len);
                acc(grads, *x, &mut |s| {
                    for r in 0..rows {
                        for j in 0..len {
                            s[r * last + offset + j] += g[r * len + j];
                        }
                    }
                });
            }

            Op::Softmax { x } => {
                let vy = self.value(id).data();
                let n = self.value(id).last_dim();
                acc(grads, *x, &mut |s| {
                    for r in 0..s.len() / n {
                        let y = &vy[r * n..r * n + n];
                        let gr = &g[r * n..r * n + n];
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }

            Op::Reshape { x } => acc(grads, *x, &mut |s| add_into(s, g)),

            Op::Sum { x } => {
                let gv = g[0];
                acc(grads, *x, &mut |s| {
                    for v in s.iter_mut() {
                        *v += gv;
                    }
                });
            }

            Op::CrossEntropy { logits, targets } => {
                let vl = self.value(*logits);
                let classes = vl.shape()[1];
                let rows = vl.shape()[0];
                let scale = g[0] / rows as f64;
                acc(grads, *logits, &mut |s| {
                    for (r, row) in vl.data().chunks(classes).enumerate() {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..classes {
                            let p = (row[j] - m).exp() / sum;
                            let y = if targets[r] == j { 1.0 } else { 0.0 };
                            s[r * classes + j] += scale * (p - y);
                        }
                    }
                });
            }

            Op::GaussianWeights { mu, var, positions } => {
                let vm = self.value(*mu).data();
                let vv = self.value(*var).data();
                let vw = self.value(id).data();
                let positions = *positions;
                acc(grads, *mu, &mut |s| {
                    for i in 0..s.len() {
                        let mut total = 0.0;
                        for p in 0..positions {
                            let d = (p + 1) as f64 - vm[i];
                            total += g[i * positions + p] * vw[i * positions + p] * d / vv[i];
                        }
                        s[i] += total;
                    }
                });
                acc(grads, *var, &mut |s| {
                    for i in 0..s.len() {
                        let mut total = 0.0;
                        for p in 0..positions {
                            let d = (p + 1) as f64 - vm[i];
                            let w = vw[i * positions + p];
                            total += g[i * positions + p]
                                * w
                                * (d * d / (2.0 * vv[i] * vv[i]) - 1.0 / (2.0 * vv[i]));
                        }
                        s[i] += total;
                    }
                });
            }

            Op::MixRows { weights, values } => {
                let vw = self.value(*weights);
                let vv = self.value(*values);
                let (batch, c, p) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                let wd = vw.data();
                let vd = vv.data();
                acc(grads, *weights, &mut |s| {
                    for b in 0..batch {
                        for j in 0..c {
                            let gbc = g[b * c + j];
                            for q in 0..p {
                                s[(b * c + j) * p + q] += gbc * vd[b * p + q];
                            }
                        }
                    }
                });
                acc(grads, *values, &mut |s| {
                    for b in 0..batch {
                        for j in 0..c {
                            let gbc = g[b * c + j];
                            let wrow = &wd[(b * c + j) * p..(b * c + j) * p + p];
                            for q in 0..p {
                                s[b * p + q] += gbc * wrow[q];
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes the loss does not
/// reach have no entry and read back as zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of `id` as a tensor shaped like its value; zeros when the
    /// node is unreachable from the loss.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        let shape = tape.value(id).shape().to_vec();
        match self.get(id) {
            Some(g) => Tensor::from_vec(&shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Central-difference gradient of `eval` w.r.t. each input tensor,
    /// compared elementwise against the analytic gradient.
    fn check_op<F>(inputs: &mut [Tensor], eval: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let run = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = eval(&mut tape, &ids);
            let loss = tape.sum(out).unwrap();
            let grads = tape.backward(loss).unwrap();
            let gs = ids.iter().map(|&id| grads.wrt(&tape, id)).collect();
            (tape.value(loss).item(), gs)
        };
        let (_, analytic) = run(inputs);

        let h = 1e-5;
        for ti in 0..inputs.len() {
            for ei in 0..inputs[ti].numel() {
                let orig = inputs[ti].data()[ei];
                inputs[ti].data_mut()[ei] = orig + h;
                let (fp, _) = run(inputs);
                inputs[ti].data_mut()[ei] = orig - h;
                let (fm, _) = run(inputs);
                inputs[ti].data_mut()[ei] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[ti].data()[ei];
                let err = check::relative_error(a, numeric);
                assert!(
                    err < tol,
                    "input {ti} element {ei}: analytic {a} vs numeric {numeric} (rel err {err})"
                );
            }
        }
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut r = rng(1);
        let mut inputs = vec![
            rand_tensor(&mut r, &[3, 4], -1.0, 1.0),
            rand_tensor(&mut r, &[4, 2], -1.0, 1.0),
        ];
        check_op(&mut inputs, |t, ids| t.matmul(ids[0], ids[1]).unwrap(), 1e-6);
    }

    #[test]
    fn elementwise_backward_matches_finite_differences() {
        let mut r = rng(2);
        for kind in [BinKind::Add, BinKind::Sub, BinKind::Mul] {
            let mut inputs = vec![
                rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            ];
            check_op(&mut inputs, |t, ids| t.bin(kind, ids[0], ids[1]).unwrap(), 1e-6);
        }
        // Keep the divisor well away from zero.
        let mut inputs = vec![
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 3], 0.5, 2.0),
        ];
        check_op(&mut inputs, |t, ids| t.div(ids[0], ids[1]).unwrap(), 1e-6);
    }

    #[test]
    fn unary_backward_matches_finite_differences() {
        let mut r = rng(3);
        for kind in [UnKind::Sigmoid, UnKind::Tanh, UnKind::Exp, UnKind::Softplus] {
            let mut inputs = vec![rand_tensor(&mut r, &[2, 4], -2.0, 2.0)];
            check_op(&mut inputs, |t, ids| t.un(kind, ids[0]).unwrap(), 1e-6);
        }
        for kind in [UnKind::Log, UnKind::Sqrt] {
            let mut inputs = vec![rand_tensor(&mut r, &[2, 4], 0.5, 2.0)];
            check_op(&mut inputs, |t, ids| t.un(kind, ids[0]).unwrap(), 1e-6);
        }
    }

    #[test]
    fn structural_ops_backward_matches_finite_differences() {
        let mut r = rng(4);
        let mut inputs = vec![
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[3], -1.0, 1.0),
        ];
        check_op(&mut inputs, |t, ids| t.add_bias(ids[0], ids[1]).unwrap(), 1e-6);

        let mut inputs = vec![
            rand_tensor(&mut r, &[2, 2], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 1], -1.0, 1.0),
        ];
        check_op(&mut inputs, |t, ids| t.concat(ids).unwrap(), 1e-6);

        let mut inputs = vec![rand_tensor(&mut r, &[3, 6], -1.0, 1.0)];
        check_op(&mut inputs, |t, ids| t.slice(ids[0], 2, 3).unwrap(), 1e-6);

        let mut inputs = vec![rand_tensor(&mut r, &[2, 6], -1.0, 1.0)];
        check_op(&mut inputs, |t, ids| t.reshape(ids[0], &[2, 3, 2]).unwrap(), 1e-6);

        let mut inputs = vec![
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[1], 0.3, 1.5),
        ];
        check_op(&mut inputs, |t, ids| t.scale(ids[0], ids[1]).unwrap(), 1e-6);

        let mut inputs = vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0)];
        check_op(&mut inputs, |t, ids| t.mul_const(ids[0], -1.7).unwrap(), 1e-6);
        let mut inputs = vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0)];
        check_op(&mut inputs, |t, ids| t.add_const(ids[0], 0.9).unwrap(), 1e-6);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut r = rng(5);
        // Weight the softmax output so the gradient is nontrivial.
        let w = rand_tensor(&mut r, &[2, 5], -1.0, 1.0);
        let mut inputs = vec![rand_tensor(&mut r, &[2, 5], -2.0, 2.0)];
        check_op(
            &mut inputs,
            |t, ids| {
                let s = t.softmax(ids[0]).unwrap();
                let wl = t.leaf(w.clone());
                t.mul(s, wl).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_backward_matches_finite_differences() {
        let mut r = rng(6);
        let targets = vec![2, 0, 4];
        let mut inputs = vec![rand_tensor(&mut r, &[3, 5], -2.0, 2.0)];
        check_op(
            &mut inputs,
            |t, ids| t.cross_entropy(ids[0], &targets).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn gaussian_ops_backward_matches_finite_differences() {
        let mut r = rng(7);
        let phi = rand_tensor(&mut r, &[2, 6], -1.0, 1.0);
        let mut inputs = vec![
            rand_tensor(&mut r, &[2, 3], 0.5, 5.5),
            rand_tensor(&mut r, &[2, 3], 0.5, 3.0),
        ];
        check_op(
            &mut inputs,
            |t, ids| {
                let w = t.gaussian_weights(ids[0], ids[1], 6).unwrap();
                let pl = t.leaf(phi.clone());
                t.mix_rows(w, pl).unwrap()
            },
            1e-6,
        );
        // Gradients w.r.t. the mixed values as well.
        let mu = rand_tensor(&mut r, &[2, 3], 1.0, 4.0);
        let var = rand_tensor(&mut r, &[2, 3], 0.5, 2.0);
        let mut inputs = vec![rand_tensor(&mut r, &[2, 4], -1.0, 1.0)];
        check_op(
            &mut inputs,
            |t, ids| {
                let m = t.leaf(mu.clone());
                let v = t.leaf(var.clone());
                let w = t.gaussian_weights(m, v, 4).unwrap();
                t.mix_rows(w, ids[0]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[4, 256]));
        let loss = tape.cross_entropy(logits, &[0, 10, 100, 255]).unwrap();
        let expected = (256f64).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut r = rng(8);
        let x = rand_tensor(&mut r, &[5, 7], -30.0, 30.0);
        let shifted = Tensor::from_vec(
            x.shape(),
            x.data().iter().map(|v| v + 123.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let b = tape.leaf(shifted);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for row in tape.value(sa).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_nodes_get_zero_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(&[3.0, 4.0]));
        let _orphan = tape.tanh(b).unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b), None);
        assert_eq!(grads.wrt(&tape, b).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_pure_and_repeatable() {
        let mut r = rng(9);
        let x = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let wi = tape.leaf(w);
        let y = tape.matmul(xi, wi).unwrap();
        let z = tape.tanh(y).unwrap();
        let loss = tape.sum(z).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        let a = g1.get(wi).unwrap();
        let b = g2.get(wi).unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_aborts_on_first_non_finite_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 800.0]));
        let err = tape.exp(x).unwrap_err();
        match err {
            Error::NonFinite { op, index } => {
                assert_eq!(op, "exp");
                assert_eq!(index, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn domain_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let z = tape.leaf(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::Domain { op: "div", .. })));
        let neg = tape.leaf(Tensor::vector(&[-1.0, 2.0]));
        assert!(matches!(tape.log(neg), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Dimension { op: "matmul", .. })
        ));
        let c = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let cat = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 5]);
        assert_eq!(tape.concat_bounds(cat).unwrap(), vec![(0, 2), (2, 3)]);
        let back = tape.slice(cat, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
    }

    #[test]
    fn gaussian_density_matches_hand_values() {
        // Standard normal at 0: 1/sqrt(2π) ≈ 0.3989422804014327.
        let v = gaussian_density(0.0, 0.0, 1.0).unwrap();
        assert!((v - 0.3989422804014327).abs() < 1e-15);
        // N(1, 4) at 3: exp(-4/8)/sqrt(8π) = exp(-0.5)/sqrt(8π).
        let want = (-0.5f64).exp() / (8.0 * std::f64::consts::PI).sqrt();
        let got = gaussian_density(3.0, 1.0, 4.0).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!(gaussian_density(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_density(0.0, 0.0, -1.0).is_err());
    }
}
