//! The computation tape.
//!
//! A [`Graph`] is a Wengert list: every primitive application appends a node
//! holding the op, its input ids and the computed value. Creation order is a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once and accumulates gradients additively across
//! fan-out.

use super::kernels;
use super::{Result, Tensor, TensorError};
use crate::ctc;
use crate::rng::SeededRng;

pub type NodeId = usize;

/// Primitive operations. Auxiliary data that is not differentiated
/// (token ids, dropout masks, CTC labels) lives inside the op itself.
#[derive(Debug, Clone)]
pub enum Op {
    /// Externally supplied value; participates in backward iff the tensor
    /// had `requires_grad` set.
    Leaf,
    /// Externally supplied value without gradient.
    Constant,
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul,
    /// 2-D transpose.
    Transpose,
    /// Element-wise sum of two same-shape tensors.
    Add,
    /// `[m,n] + [n]` row-broadcast (bias add).
    AddRow,
    Sub,
    /// Element-wise product.
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// Softmax over the last axis.
    Softmax,
    LogSoftmax,
    /// `(x, gain, bias)` normalized over the last axis, ε inside the sqrt.
    LayerNorm { eps: f64 },
    Gelu,
    Exp,
    Ln,
    /// `table[ids[t], :]` for each t; input is the table.
    EmbeddingLookup { ids: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Full reduction to a scalar.
    Mean,
    Sum,
    /// Inverted-scaling dropout; mask entries are 0 or 1/keep.
    Dropout { mask: Vec<f64> },
    /// Negative log CTC marginal of the label sequence given a `[Z, C]`
    /// log-probability lattice. `blank` must be `C-1`.
    CtcLoss { labels: Vec<usize>, blank: usize },
    /// `sum_ij p ln(p/q)` with the `0 ln 0 = 0` convention.
    KlDiv,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Records one forward pass; replays it in reverse for gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Drop all nodes but keep allocation capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
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

    /// Register an input tensor; it receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad();
        self.push(Op::Leaf, vec![], t, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, vec![], t, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value, needs_grad });
        self.grads.push(None);
        id
    }

    /// Apply a primitive. Shapes are validated; the output value is computed
    /// eagerly and the application is recorded for the backward pass.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            assert!(i < self.nodes.len(), "input id out of range");
        }
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let value = self.forward(&op, inputs)?;
        Ok(self.push(op, inputs.to_vec(), value, needs))
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor> {
        let val = |i: usize| -> &Tensor { &self.nodes[inputs[i]].value };
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Contract(format!(
                    "{:?} expects {} inputs, got {}",
                    op,
                    n,
                    inputs.len()
                )))
            }
        };
        match op {
            Op::Leaf | Op::Constant => {
                Err(TensorError::Contract("leaf/constant cannot be applied".into()))
            }
            Op::MatMul => {
                arity(2)?;
                let (a, b) = (val(0), val(1));
                let (m, k) = a.dims2()?;
                let (k2, n) = b.dims2()?;
                if k != k2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; m * n];
                kernels::matmul(a.data(), b.data(), m, k, n, &mut out);
                Ok(Tensor::from_raw(vec![m, n], out))
            }
            Op::Transpose => {
                arity(1)?;
                let (m, n) = val(0).dims2()?;
                let mut out = vec![0.0; m * n];
                kernels::transpose(val(0).data(), m, n, &mut out);
                Ok(Tensor::from_raw(vec![n, m], out))
            }
            Op::Add | Op::Sub | Op::Mul => {
                arity(2)?;
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "elementwise",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let data = match op {
                    Op::Add => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                    Op::Sub => a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
                    _ => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                };
                Ok(Tensor::from_raw(a.shape().to_vec(), data))
            }
            Op::AddRow => {
                arity(2)?;
                let (a, b) = (val(0), val(1));
                let (m, n) = a.dims2()?;
                if b.shape() != [n] {
                    return Err(TensorError::ShapeMismatch {
                        op: "add_row",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let mut out = a.data().to_vec();
                for r in 0..m {
                    for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Ok(Tensor::from_raw(vec![m, n], out))
            }
            Op::Scale(c) => {
                arity(1)?;
                let data = val(0).data().iter().map(|x| x * c).collect();
                Ok(Tensor::from_raw(val(0).shape().to_vec(), data))
            }
            Op::AddScalar(c) => {
                arity(1)?;
                let data = val(0).data().iter().map(|x| x + c).collect();
                Ok(Tensor::from_raw(val(0).shape().to_vec(), data))
            }
            Op::Softmax | Op::LogSoftmax => {
                arity(1)?;
                let x = val(0);
                let cols = *x.shape().last().ok_or_else(|| TensorError::InvalidShape {
                    op: "softmax",
                    shape: x.shape().to_vec(),
                    msg: "rank 0".into(),
                })?;
                let rows = x.numel() / cols.max(1);
                let mut out = vec![0.0; x.numel()];
                if matches!(op, Op::Softmax) {
                    kernels::softmax_rows(x.data(), rows, cols, &mut out);
                } else {
                    kernels::log_softmax_rows(x.data(), rows, cols, &mut out);
                }
                Ok(Tensor::from_raw(x.shape().to_vec(), out))
            }
            Op::LayerNorm { eps } => {
                arity(3)?;
                let (x, gain, bias) = (val(0), val(1), val(2));
                let n = *x.shape().last().unwrap_or(&0);
                if n == 0 || gain.shape() != [n] || bias.shape() != [n] {
                    return Err(TensorError::ShapeMismatch {
                        op: "layer_norm",
                        lhs: x.shape().to_vec(),
                        rhs: gain.shape().to_vec(),
                    });
                }
                let rows = x.numel() / n;
                let mut out = vec![0.0; x.numel()];
                for r in 0..rows {
                    let xi = &x.data()[r * n..(r + 1) * n];
                    let o = &mut out[r * n..(r + 1) * n];
                    let mean = xi.iter().sum::<f64>() / n as f64;
                    let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for ((o, &v), (&g, &b)) in
                        o.iter_mut().zip(xi).zip(gain.data().iter().zip(bias.data()))
                    {
                        *o = g * (v - mean) * inv + b;
                    }
                }
                Ok(Tensor::from_raw(x.shape().to_vec(), out))
            }
            Op::Gelu => {
                arity(1)?;
                let data = val(0).data().iter().map(|&x| kernels::gelu(x)).collect();
                Ok(Tensor::from_raw(val(0).shape().to_vec(), data))
            }
            Op::Exp => {
                arity(1)?;
                let data = val(0).data().iter().map(|x| x.exp()).collect();
                Ok(Tensor::from_raw(val(0).shape().to_vec(), data))
            }
            Op::Ln => {
                arity(1)?;
                let x = val(0);
                if x.data().iter().any(|&v| v <= 0.0) {
                    return Err(TensorError::NonFinite { context: "ln of non-positive value".into() });
                }
                let data = x.data().iter().map(|v| v.ln()).collect();
                Ok(Tensor::from_raw(x.shape().to_vec(), data))
            }
            Op::EmbeddingLookup { ids } => {
                arity(1)?;
                let table = val(0);
                let (v, d) = table.dims2()?;
                if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
                    return Err(TensorError::InvalidArg(format!(
                        "embedding id {} out of range for table with {} rows",
                        bad, v
                    )));
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
                }
                Ok(Tensor::from_raw(vec![ids.len(), d], out))
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(TensorError::Contract("concat of zero tensors".into()));
                }
                let rank = val(0).shape().len();
                if *axis >= rank {
                    return Err(TensorError::InvalidArg(format!(
                        "concat axis {} out of range for rank {}",
                        axis, rank
                    )));
                }
                for i in 1..inputs.len() {
                    let (a, b) = (val(0).shape(), val(i).shape());
                    let compatible = a.len() == b.len()
                        && a.iter().zip(b).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: a.to_vec(),
                            rhs: b.to_vec(),
                        });
                    }
                }
                let mut shape = val(0).shape().to_vec();
                shape[*axis] = inputs.iter().map(|&i| self.nodes[i].value.shape()[*axis]).sum();
                let mut out = vec![0.0; shape.iter().product()];
                if *axis == 0 {
                    let mut off = 0;
                    for &i in inputs {
                        let d = self.nodes[i].value.data();
                        out[off..off + d.len()].copy_from_slice(d);
                        off += d.len();
                    }
                } else {
                    // axis 1 of a 2-D tensor
                    let rows = shape[0];
                    let total_cols = shape[1];
                    let mut col_off = 0;
                    for &i in inputs {
                        let t = &self.nodes[i].value;
                        let (m, c) = t.dims2()?;
                        debug_assert_eq!(m, rows);
                        for r in 0..rows {
                            out[r * total_cols + col_off..r * total_cols + col_off + c]
                                .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                        }
                        col_off += c;
                    }
                }
                Ok(Tensor::from_raw(shape, out))
            }
            Op::Slice { axis, start, len } => {
                arity(1)?;
                let x = val(0);
                let shape = x.shape();
                if *axis >= shape.len() || start + len > shape[*axis] || *len == 0 {
                    return Err(TensorError::InvalidArg(format!(
                        "slice [{}, {}+{}) out of range for shape {:?}",
                        axis, start, len, shape
                    )));
                }
                match shape.len() {
                    1 => Ok(Tensor::from_raw(vec![*len], x.data()[*start..start + len].to_vec())),
                    2 => {
                        let (m, n) = (shape[0], shape[1]);
                        if *axis == 0 {
                            Ok(Tensor::from_raw(
                                vec![*len, n],
                                x.data()[start * n..(start + len) * n].to_vec(),
                            ))
                        } else {
                            let mut out = Vec::with_capacity(m * len);
                            for r in 0..m {
                                out.extend_from_slice(&x.data()[r * n + start..r * n + start + len]);
                            }
                            Ok(Tensor::from_raw(vec![m, *len], out))
                        }
                    }
                    _ => Err(TensorError::InvalidShape {
                        op: "slice",
                        shape: shape.to_vec(),
                        msg: "only rank 1/2 supported".into(),
                    }),
                }
            }
            Op::Mean | Op::Sum => {
                arity(1)?;
                let x = val(0);
                if x.numel() == 0 {
                    return Err(TensorError::Contract("reduction over empty tensor".into()));
                }
                let s: f64 = x.data().iter().sum();
                let v = if matches!(op, Op::Mean) { s / x.numel() as f64 } else { s };
                Ok(Tensor::from_raw(vec![1], vec![v]))
            }
            Op::Dropout { mask } => {
                arity(1)?;
                let x = val(0);
                if mask.len() != x.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: "dropout",
                        lhs: x.shape().to_vec(),
                        rhs: vec![mask.len()],
                    });
                }
                let data = x.data().iter().zip(mask).map(|(v, m)| v * m).collect();
                Ok(Tensor::from_raw(x.shape().to_vec(), data))
            }
            Op::CtcLoss { labels, blank } => {
                arity(1)?;
                let lp = val(0);
                let (z, c) = lp.dims2()?;
                if *blank != c - 1 {
                    return Err(TensorError::InvalidArg(format!(
                        "blank must be the last class ({}), got {}",
                        c - 1,
                        blank
                    )));
                }
                let neg_log = ctc::neg_log_marginal_lattice(lp.data(), z, c, labels)
                    .map_err(|e| TensorError::Contract(e.to_string()))?;
                Ok(Tensor::from_raw(vec![1], vec![neg_log]))
            }
            Op::KlDiv => {
                arity(2)?;
                let (p, q) = (val(0), val(1));
                if p.shape() != q.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "kl_div",
                        lhs: p.shape().to_vec(),
                        rhs: q.shape().to_vec(),
                    });
                }
                let mut acc = 0.0;
                for (&pi, &qi) in p.data().iter().zip(q.data()) {
                    if pi > 0.0 {
                        if qi <= 0.0 {
                            return Err(TensorError::NonFinite {
                                context: "kl_div with zero reference mass".into(),
                            });
                        }
                        acc += pi * (pi / qi).ln();
                    }
                }
                Ok(Tensor::from_raw(vec![1], vec![acc]))
            }
        }
    }

    /// Reverse sweep from `loss` (must be a scalar). Gradients of all
    /// reachable nodes with `needs_grad` become available via [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let d_out = self.grads[i].take().expect("grad present");
            backward_op(&self.nodes, &mut self.grads, i, &d_out);
            self.grads[i] = Some(d_out);
        }
        Ok(())
    }

    /// Gradient of the last backward pass for `id`, if any flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Gradient for a leaf, zeros if no path reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id].value.numel()],
        }
    }

    // Convenience builders.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow, &[a, bias])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps: 1e-6 }, &[x, gain, bias])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Ln, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.apply(Op::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        self.apply(Op::KlDiv, &[p, q])
    }

    /// Dropout at `rate` (train-mode only). Draws one uniform per element
    /// from `rng` regardless of outcome.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut SeededRng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArg(format!("dropout rate {} not in [0,1)", rate)));
        }
        let n = self.nodes[x].value.numel();
        let keep = 1.0 - rate;
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.uniform01() < rate { 0.0 } else { 1.0 / keep }).collect();
        self.apply(Op::Dropout { mask }, &[x])
    }

    /// −log P(labels | lattice) under CTC; `lp` is a `[Z, C]` log-probability
    /// node with the blank as class `C-1`.
    pub fn ctc_neg_log(&mut self, lp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let c = *self.nodes[lp].value.shape().last().unwrap_or(&0);
        self.apply(Op::CtcLoss { labels: labels.to_vec(), blank: c.saturating_sub(1) }, &[lp])
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, add: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    add(slot);
}

fn backward_op(nodes: &[Node], grads: &mut Vec<Option<Vec<f64>>>, i: NodeId, d_out: &[f64]) {
    let node = &nodes[i];
    let ins = &node.inputs;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul => {
            let a = &nodes[ins[0]].value;
            let b = &nodes[ins[1]].value;
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            accumulate(grads, nodes, ins[0], |g| {
                kernels::matmul_nt_acc(d_out, b.data(), m, n, k, g);
            });
            accumulate(grads, nodes, ins[1], |g| {
                kernels::matmul_tn_acc(a.data(), d_out, m, k, n, g);
            });
        }
        Op::Transpose => {
            let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
            accumulate(grads, nodes, ins[0], |g| {
                for r in 0..n {
                    for c in 0..m {
                        g[c * n + r] += d_out[r * m + c];
                    }
                }
            });
        }
        Op::Add => {
            accumulate(grads, nodes, ins[0], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi += d;
                }
            });
            accumulate(grads, nodes, ins[1], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi += d;
                }
            });
        }
        Op::AddRow => {
            let n = nodes[ins[1]].value.numel();
            accumulate(grads, nodes, ins[0], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi += d;
                }
            });
            accumulate(grads, nodes, ins[1], |g| {
                for (r, chunk) in d_out.chunks_exact(n).enumerate() {
                    let _ = r;
                    for (gi, d) in g.iter_mut().zip(chunk) {
                        *gi += d;
                    }
                }
            });
        }
        Op::Sub => {
            accumulate(grads, nodes, ins[0], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi += d;
                }
            });
            accumulate(grads, nodes, ins[1], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi -= d;
                }
            });
        }
        Op::Mul => {
            let a = nodes[ins[0]].value.data();
            let b = nodes[ins[1]].value.data();
            accumulate(grads, nodes, ins[0], |g| {
                for ((gi, d), bv) in g.iter_mut().zip(d_out).zip(b) {
                    *gi += d * bv;
                }
            });
            accumulate(grads, nodes, ins[1], |g| {
                for ((gi, d), av) in g.iter_mut().zip(d_out).zip(a) {
                    *gi += d * av;
                }
            });
        }
        Op::Scale(c) => {
            let c = *c;
            accumulate(grads, nodes, ins[0], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi += c * d;
                }
            });
        }
        Op::AddScalar(_) => {
            accumulate(grads, nodes, ins[0], |g| {
                for (gi, d) in g.iter_mut().zip(d_out) {
                    *gi += d;
                }
            });
        }
        Op::Softmax => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, ins[0], |g| {
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let ds = &d_out[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                    for ((gi, &yi), &di) in
                        g[r * cols..(r + 1) * cols].iter_mut().zip(ys).zip(ds)
                    {
                        *gi += yi * (di - dot);
                    }
                }
            });
        }
        Op::LogSoftmax => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, ins[0], |g| {
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let ds = &d_out[r * cols..(r + 1) * cols];
                    let dsum: f64 = ds.iter().sum();
                    for ((gi, &yi), &di) in
                        g[r * cols..(r + 1) * cols].iter_mut().zip(ys).zip(ds)
                    {
                        *gi += di - yi.exp() * dsum;
                    }
                }
            });
        }
        Op::LayerNorm { eps } => {
            let x = nodes[ins[0]].value.data();
            let gain = nodes[ins[1]].value.data();
            let n = gain.len();
            let rows = x.len() / n;
            let nf = n as f64;
            // Recompute per-row statistics; cheaper than caching them.
            let mut xhat = vec![0.0; n];
            for r in 0..rows {
                let xs = &x[r * n..(r + 1) * n];
                let ds = &d_out[r * n..(r + 1) * n];
                let mean = xs.iter().sum::<f64>() / nf;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let inv = 1.0 / (var + eps).sqrt();
                for (h, &v) in xhat.iter_mut().zip(xs) {
                    *h = (v - mean) * inv;
                }
                accumulate(grads, nodes, ins[1], |g| {
                    for ((gi, d), h) in g.iter_mut().zip(ds).zip(&xhat) {
                        *gi += d * h;
                    }
                });
                accumulate(grads, nodes, ins[2], |g| {
                    for (gi, d) in g.iter_mut().zip(ds) {
                        *gi += d;
                    }
                });
                accumulate(grads, nodes, ins[0], |g| {
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_dot = 0.0;
                    for ((&d, &gv), &h) in ds.iter().zip(gain).zip(&xhat) {
                        let dh = d * gv;
                        dxhat_mean += dh;
                        dxhat_dot += dh * h;
                    }
                    dxhat_mean /= nf;
                    dxhat_dot /= nf;
                    for (((gi, &d), &gv), &h) in
                        g[r * n..(r + 1) * n].iter_mut().zip(ds).zip(gain).zip(&xhat)
                    {
                        *gi += inv * (d * gv - dxhat_mean - h * dxhat_dot);
                    }
                });
            }
        }
        Op::Gelu => {
            let x = nodes[ins[0]].value.data();
            accumulate(grads, nodes, ins[0], |g| {
                for ((gi, d), &xv) in g.iter_mut().zip(d_out).zip(x) {
                    *gi += d * kernels::gelu_derivative(xv);
                }
            });
        }
        Op::Exp => {
            let y = node.value.data();
            accumulate(grads, nodes, ins[0], |g| {
                for ((gi, d), &yv) in g.iter_mut().zip(d_out).zip(y) {
                    *gi += d * yv;
                }
            });
        }
        Op::Ln => {
            let x = nodes[ins[0]].value.data();
            accumulate(grads, nodes, ins[0], |g| {
                for ((gi, d), &xv) in g.iter_mut().zip(d_out).zip(x) {
                    *gi += d / xv;
                }
            });
        }
        Op::EmbeddingLookup { ids } => {
            let d = node.value.shape()[1];
            accumulate(grads, nodes, ins[0], |g| {
                for (t, &id) in ids.iter().enumerate() {
                    for (gi, dv) in g[id * d..(id + 1) * d].iter_mut().zip(&d_out[t * d..(t + 1) * d])
                    {
                        *gi += dv;
                    }
                }
            });
        }
        Op::Concat { axis } => {
            if *axis == 0 {
                let mut off = 0;
                for &inp in ins {
                    let len = nodes[inp].value.numel();
                    accumulate(grads, nodes, inp, |g| {
                        for (gi, d) in g.iter_mut().zip(&d_out[off..off + len]) {
                            *gi += d;
                        }
                    });
                    off += len;
                }
            } else {
                let rows = node.value.shape()[0];
                let total_cols = node.value.shape()[1];
                let mut col_off = 0;
                for &inp in ins {
                    let c = nodes[inp].value.shape()[1];
                    accumulate(grads, nodes, inp, |g| {
                        for r in 0..rows {
                            let src = &d_out[r * total_cols + col_off..r * total_cols + col_off + c];
                            for (gi, d) in g[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *gi += d;
                            }
                        }
                    });
                    col_off += c;
                }
            }
        }
        Op::Slice { axis, start, len } => {
            let in_shape = nodes[ins[0]].value.shape().to_vec();
            accumulate(grads, nodes, ins[0], |g| match in_shape.len() {
                1 => {
                    for (gi, d) in g[*start..start + len].iter_mut().zip(d_out) {
                        *gi += d;
                    }
                }
                _ => {
                    let (m, n) = (in_shape[0], in_shape[1]);
                    if *axis == 0 {
                        for (gi, d) in g[start * n..(start + len) * n].iter_mut().zip(d_out) {
                            *gi += d;
                        }
                    } else {
                        for r in 0..m {
                            for (gi, d) in g[r * n + start..r * n + start + len]
                                .iter_mut()
                                .zip(&d_out[r * len..(r + 1) * len])
                            {
                                *gi += d;
                            }
                        }
                    }
                }
            });
        }
        Op::Mean => {
            let n = nodes[ins[0]].value.numel() as f64;
            let d = d_out[0] / n;
            accumulate(grads, nodes, ins[0], |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }
        Op::Sum => {
            let d = d_out[0];
            accumulate(grads, nodes, ins[0], |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }
        Op::Dropout { mask } => {
            accumulate(grads, nodes, ins[0], |g| {
                for ((gi, d), m) in g.iter_mut().zip(d_out).zip(mask) {
                    *gi += d * m;
                }
            });
        }
        Op::CtcLoss { labels, blank: _ } => {
            let lp = &nodes[ins[0]].value;
            let (z, c) = (lp.shape()[0], lp.shape()[1]);
            let mut dg = vec![0.0; z * c];
            ctc::neg_log_marginal_grad(lp.data(), z, c, labels, &mut dg)
                .expect("ctc backward on a lattice that passed the forward");
            let scale = d_out[0];
            accumulate(grads, nodes, ins[0], |g| {
                for (gi, d) in g.iter_mut().zip(&dg) {
                    *gi += scale * d;
                }
            });
        }
        Op::KlDiv => {
            let p = nodes[ins[0]].value.data();
            let q = nodes[ins[1]].value.data();
            let d = d_out[0];
            accumulate(grads, nodes, ins[0], |g| {
                for ((gi, &pi), &qi) in g.iter_mut().zip(p).zip(q) {
                    if pi > 0.0 {
                        *gi += d * ((pi / qi).ln() + 1.0);
                    }
                }
            });
            accumulate(grads, nodes, ins[1], |g| {
                for ((gi, &pi), &qi) in g.iter_mut().zip(p).zip(q) {
                    if pi > 0.0 {
                        *gi -= d * pi / qi;
                    }
                }
            });
        }
    }
}
