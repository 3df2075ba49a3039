//! Tape-based reverse-mode differentiation over a fixed set of tensor
//! primitives.
//!
//! Nodes are appended to a flat list as operations are recorded, so the
//! list order is already a topological order; `backward` walks it once in
//! reverse. Gradients are only propagated into nodes that (transitively)
//! depend on a leaf created with `requires_grad = true`.

use crate::error::{Error, Result};

use super::tensor::{as_matrix, gemm, log_sum_exp, sigmoid, softmax_in_place, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tag of the primitive that produced a node, with whatever the backward
/// rule needs cached from the forward pass.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlRows {
        log_q: NodeId,
        p_ref: Vec<f64>,
    },
    LogSigmoid(NodeId),
    PickCols {
        x: NodeId,
        cols: Vec<usize>,
    },
    SegmentSum {
        x: NodeId,
        segments: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node in a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
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

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; the shape of a linear layer applied to row vectors.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).log_softmax_rows();
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let (m, d) = as_matrix(xt, "layer_norm")?;
        let g = self.value(gain);
        let b = self.value(bias);
        if g.len() != d || b.len() != d {
            return Err(Error::dim("layer_norm", xt.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xt.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mu) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, d) = as_matrix(t, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `N×d`; `segments` lists the lengths of the
    /// sequences stacked along the rows (summing to `N`). Each sequence
    /// attends only to its own earlier positions, head by head, with
    /// scores scaled by `1/√(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[usize],
        heads: usize,
    ) -> Result<NodeId> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = as_matrix(qt, "causal_attention")?;
        if kt.shape() != qt.shape() || vt.shape() != qt.shape() {
            return Err(Error::dim("causal_attention", qt.shape(), kt.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != n || segments.contains(&0) {
            return Err(Error::Contract(format!(
                "segments {segments:?} do not partition {n} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let probs_len: usize = segments.iter().map(|s| s * s * heads).sum();
        let mut probs = vec![0.0; probs_len];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut offset = 0;
        let mut pbase = 0;
        for &len in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let p = &mut probs[pbase..pbase + len * len];
                for t in 0..len {
                    let qrow = &qd[(offset + t) * d + c0..(offset + t) * d + c0 + dh];
                    let prow = &mut p[t * len..t * len + t + 1];
                    for (u, pv) in prow.iter_mut().enumerate() {
                        let krow = &kd[(offset + u) * d + c0..(offset + u) * d + c0 + dh];
                        *pv = scale * dot(qrow, krow);
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(offset + t) * d + c0..(offset + t) * d + c0 + dh];
                    for (u, &pv) in prow.iter().enumerate() {
                        let vrow = &vd[(offset + u) * d + c0..(offset + u) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pv * x;
                        }
                    }
                }
                pbase += len * len;
            }
            offset += len;
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lt = self.value(logits);
        let (m, v) = as_matrix(lt, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", lt.shape(), &[targets.len()]));
        }
        let mut probs = lt.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    context: "cross_entropy target",
                    index: t,
                    limit: v,
                });
            }
            let row = &mut probs[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / m as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(p_ref ‖ q)` where `log_q` holds log-probabilities.
    /// The reference distribution is a constant.
    pub fn kl_divergence_rows(&mut self, p_ref: &Tensor, log_q: NodeId) -> Result<NodeId> {
        let lq = self.value(log_q);
        if p_ref.shape() != lq.shape() {
            return Err(Error::dim("kl_divergence_rows", p_ref.shape(), lq.shape()));
        }
        let v = lq.cols();
        let m = lq.len() / v;
        let mut total = 0.0;
        for i in 0..m {
            let p = p_ref.row(i);
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 || p.iter().any(|&x| x < 0.0) {
                return Err(Error::Contract(format!(
                    "reference row {i} is not a distribution (sums to {s})"
                )));
            }
            for (&pv, &lqv) in p.iter().zip(lq.row(i)) {
                if pv > 0.0 {
                    total += pv * (pv.ln() - lqv);
                }
            }
        }
        let value = Tensor::scalar(total / m as f64);
        let rg = self.rg(&[log_q]);
        Ok(self.push(
            value,
            Op::KlRows {
                log_q,
                p_ref: p_ref.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(super::tensor::log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    /// `out[i] = x[i, cols[i]]`, shape `[m]`.
    pub fn pick_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let (m, n) = as_matrix(xt, "pick_cols")?;
        if cols.len() != m {
            return Err(Error::dim("pick_cols", xt.shape(), &[cols.len()]));
        }
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::Index {
                    context: "pick_cols",
                    index: c,
                    limit: n,
                });
            }
            out.push(xt.data()[i * n + c]);
        }
        let value = Tensor::new(vec![m], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::PickCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Sums consecutive runs of a vector; `segments` gives the run lengths.
    pub fn segment_sum(&mut self, x: NodeId, segments: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        if segments.iter().sum::<usize>() != xt.len() || segments.is_empty() {
            return Err(Error::Contract(format!(
                "segments {segments:?} do not partition {} entries",
                xt.len()
            )));
        }
        let mut out = Vec::with_capacity(segments.len());
        let mut off = 0;
        for &s in segments {
            out.push(xt.data()[off..off + s].iter().sum());
            off += s;
        }
        let value = Tensor::new(vec![segments.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SegmentSum {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = as_matrix(at, "matmul")?;
                let (_, n) = as_matrix(bt, "matmul")?;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gy.data(), false, bt.data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, at.data(), true, gy.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), gb)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ, a: m×k, b: n×k
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = as_matrix(at, "matmul_nt")?;
                let (n, _) = as_matrix(bt, "matmul_nt")?;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gy.data(), false, bt.data(), false, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, gy.data(), true, at.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.scale(*c)),
            Op::Sum(a) => {
                let g = gy.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let g = gy.data()[0] / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), g));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = gy.data().to_vec();
                for (grow, yrow) in gx.chunks_mut(c).zip(y.data().chunks(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (g, &yv) in grow.iter_mut().zip(yrow) {
                        *g = yv * (*g - s);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = gy.data().to_vec();
                for (grow, yrow) in gx.chunks_mut(c).zip(y.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for (g, &lp) in grow.iter_mut().zip(yrow) {
                        *g -= lp.exp() * s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = self.value(*gain).data();
                let d = g.len();
                let m = rstd.len();
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * d];
                    for i in 0..m {
                        let dy = &gy.data()[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = dy[j] * g[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let r = rstd[i] / d as f64;
                        for j in 0..d {
                            let dxh = dy[j] * g[j];
                            gx[i * d + j] = r * (d as f64 * dxh - s1 - xh[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            let dy = gy.data()[i * d + j];
                            gg[j] += dy * xhat[i * d + j];
                            gb[j] += dy;
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gshape, gg)?);
                    self.accumulate(grads, *bias, Tensor::new(bshape, gb)?);
                }
            }
            Op::Gelu(a) => {
                let gx = gy.zip_map(self.value(*a), |g, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                self.accumulate(grads, *a, gx);
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let src = &gy.data()[i * d..(i + 1) * d];
                    for (dst, s) in gt.row_mut(id).iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = as_matrix(qt, "causal_attention")?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd, gyd) = (qt.data(), kt.data(), vt.data(), gy.data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                let mut ds = Vec::new();
                let mut offset = 0;
                let mut pbase = 0;
                for &len in segments {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[pbase..pbase + len * len];
                        let r = |row: usize| (offset + row) * d + c0..(offset + row) * d + c0 + dh;
                        for t in 0..len {
                            let prow = &p[t * len..t * len + t + 1];
                            let go = &gyd[r(t)];
                            ds.clear();
                            let mut s = 0.0;
                            for (u, &pv) in prow.iter().enumerate() {
                                let dp = dot(go, &vd[r(u)]);
                                ds.push(dp);
                                s += pv * dp;
                                for (gvv, &g) in gv[r(u)].iter_mut().zip(go) {
                                    *gvv += pv * g;
                                }
                            }
                            for (u, &pv) in prow.iter().enumerate() {
                                let dsc = pv * (ds[u] - s) * scale;
                                if dsc == 0.0 {
                                    continue;
                                }
                                for j in 0..dh {
                                    gq[r(t).start + j] += dsc * kd[r(u).start + j];
                                    gk[r(u).start + j] += dsc * qd[r(t).start + j];
                                }
                            }
                        }
                        pbase += len * len;
                    }
                    offset += len;
                }
                let shape = qt.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(shape.clone(), gq)?);
                self.accumulate(grads, *k, Tensor::new(shape.clone(), gk)?);
                self.accumulate(grads, *v, Tensor::new(shape, gv)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lt = self.value(*logits);
                let v = lt.cols();
                let m = targets.len();
                let c = gy.data()[0] / m as f64;
                let mut gx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * v + t] -= 1.0;
                }
                for g in gx.iter_mut() {
                    *g *= c;
                }
                self.accumulate(grads, *logits, Tensor::new(lt.shape().to_vec(), gx)?);
            }
            Op::KlRows { log_q, p_ref } => {
                let lq = self.value(*log_q);
                let m = lq.len() / lq.cols();
                let c = -gy.data()[0] / m as f64;
                let gx = p_ref.iter().map(|p| p * c).collect();
                self.accumulate(grads, *log_q, Tensor::new(lq.shape().to_vec(), gx)?);
            }
            Op::LogSigmoid(a) => {
                let gx = gy.zip_map(self.value(*a), |g, z| g * sigmoid(-z))?;
                self.accumulate(grads, *a, gx);
            }
            Op::PickCols { x, cols } => {
                let xt = self.value(*x);
                let n = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (i, &c) in cols.iter().enumerate() {
                    gx.data_mut()[i * n + c] += gy.data()[i];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentSum { x, segments } => {
                let xt = self.value(*x);
                let mut gx = Vec::with_capacity(xt.len());
                for (&s, &g) in segments.iter().zip(gy.data()) {
                    gx.extend(std::iter::repeat_n(g, s));
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = sum(x ⊙ x + x): both consumers of x contribute.
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let y = g.sum(s);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::ones(&[2, 2]));
        let x = g.param(Tensor::ones(&[1, 2]));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::zeros(&[3, 8]));
        let ce = g.cross_entropy(u, &[0, 5, 7]).unwrap();
        assert!((g.scalar(ce) - 8f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 50.0;
        let l = g.constant(logits);
        let ce = g.cross_entropy(l, &[2]).unwrap();
        assert!(g.scalar(ce) < 1e-20);

        let l = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let ce0 = g.cross_entropy(l, &[0]).unwrap();
        let ce1 = g.cross_entropy(l, &[1]).unwrap();
        let ln1pe = (1.0 + std::f64::consts::E).ln();
        assert!((g.scalar(ce0) - ln1pe).abs() < 1e-12);
        assert!((g.scalar(ce1) - (ln1pe - 1.0)).abs() < 1e-12);
        assert!((g.scalar(ce1) - 0.3133).abs() < 1e-4);

        assert!(matches!(
            g.cross_entropy(l, &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let q = Tensor::from_rows(&[&[0.2, 0.8], &[0.5, 0.5]]);
        let lq = g.constant(q.map(f64::ln));
        let kl = g.kl_divergence_rows(&q, lq).unwrap();
        assert!(g.scalar(kl).abs() < 1e-15);

        let p = Tensor::from_rows(&[&[1.0, 0.0]]);
        let lq = g.constant(Tensor::from_rows(&[&[0.5f64.ln(), 0.5f64.ln()]]));
        let kl = g.kl_divergence_rows(&p, lq).unwrap();
        assert!((g.scalar(kl) - std::f64::consts::LN_2).abs() < 1e-15);

        let bad = Tensor::from_rows(&[&[0.7, 0.7]]);
        assert!(matches!(
            g.kl_divergence_rows(&bad, lq),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
    }
}
