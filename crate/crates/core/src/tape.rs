//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation of one forward pass.
//! [`Tape::backward`] replays the record in exact reverse order and fills
//! per-node gradient buffers. The op set is exactly what the transformer
//! model and its training losses need; nothing more general is attempted.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Row gather from a 2-D table: out[i, :] = table[ids[i], :]
    Embed { table: usize, ids: Vec<usize> },
    /// x [..., in] @ w [in, out] + b [out]
    Linear { x: usize, w: usize, b: usize },
    /// q, k [B, s, H*dh] -> scaled scores [B, H, s, s]
    AttnScores {
        q: usize,
        k: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        d_head: usize,
        scale: f64,
    },
    /// Softmax over the last dim of [B, H, s, s]; invalid keys get prob 0.
    /// mask is flat [B*s] key validity.
    MaskedSoftmax {
        x: usize,
        mask: Vec<bool>,
        batch: usize,
        heads: usize,
        seq: usize,
    },
    /// probs [B, H, s, s] mixed with v [B, s, H*dh] -> [B, s, H*dh]
    AttnContext {
        p: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        d_head: usize,
    },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Relu { x: usize },
    /// Normalize over the last dim, then scale/shift by gamma/beta.
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// out[b, :] = x[b, 0, :] for x [B, s, d]
    SelectToken0 {
        x: usize,
        batch: usize,
        seq: usize,
        dim: usize,
    },
    /// Per-head multiplicative gate: x [B, s, H*dh] * gates [H]
    GateHeads {
        x: usize,
        gates: usize,
        heads: usize,
        d_head: usize,
    },
    /// Per-unit multiplicative gate over the last dim: x [..., u] * gates [u]
    GateUnits { x: usize, gates: usize },
    Sum { x: usize },
    /// Mean cross-entropy of logits [B, C] against integer labels.
    CrossEntropy { logits: usize, labels: Vec<usize> },
    /// Mean over batch of -sum softmax(teacher) * log_softmax(student).
    SoftCrossEntropy { teacher: usize, student: usize },
    /// Mean squared error over all elements.
    Mse { a: usize, b: usize },
    /// Weighted sum of scalar nodes.
    WeightedSum { terms: Vec<(usize, f64)> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> NodeId {
        let n = value.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        self.nodes.push(Node {
            shape,
            value,
            grad: vec![0.0; n],
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f64>) -> NodeId {
        self.push(shape.to_vec(), data, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let d = self.nodes[table.0].shape[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.nodes[table.0].value[i * d..(i + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.nodes[x.0].shape.clone();
        let d_in = *xs.last().unwrap();
        let (wi, wo) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
        assert_eq!(d_in, wi, "linear shape mismatch");
        let rows = self.nodes[x.0].value.len() / d_in;
        let mut out = vec![0.0; rows * wo];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for r in 0..rows {
                for j in 0..wo {
                    let mut acc = bv[j];
                    for i in 0..d_in {
                        acc += xv[r * d_in + i] * wv[i * wo + j];
                    }
                    out[r * wo + j] = acc;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = wo;
        self.push(
            shape,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    pub fn attn_scores(
        &mut self,
        q: NodeId,
        k: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        d_head: usize,
        scale: f64,
    ) -> NodeId {
        let hd = heads * d_head;
        let mut out = vec![0.0; batch * heads * seq * seq];
        {
            let qv = &self.nodes[q.0].value;
            let kv = &self.nodes[k.0].value;
            for b in 0..batch {
                for h in 0..heads {
                    for i in 0..seq {
                        for j in 0..seq {
                            let mut acc = 0.0;
                            let qo = (b * seq + i) * hd + h * d_head;
                            let ko = (b * seq + j) * hd + h * d_head;
                            for d in 0..d_head {
                                acc += qv[qo + d] * kv[ko + d];
                            }
                            out[((b * heads + h) * seq + i) * seq + j] = acc * scale;
                        }
                    }
                }
            }
        }
        self.push(
            vec![batch, heads, seq, seq],
            out,
            Op::AttnScores {
                q: q.0,
                k: k.0,
                batch,
                seq,
                heads,
                d_head,
                scale,
            },
        )
    }

    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        mask: &[bool],
        batch: usize,
        heads: usize,
        seq: usize,
    ) -> NodeId {
        let mut out = vec![0.0; batch * heads * seq * seq];
        {
            let xv = &self.nodes[x.0].value;
            for b in 0..batch {
                for h in 0..heads {
                    for i in 0..seq {
                        let base = ((b * heads + h) * seq + i) * seq;
                        let mut m = f64::NEG_INFINITY;
                        for j in 0..seq {
                            if mask[b * seq + j] {
                                m = m.max(xv[base + j]);
                            }
                        }
                        let mut z = 0.0;
                        for j in 0..seq {
                            if mask[b * seq + j] {
                                let e = (xv[base + j] - m).exp();
                                out[base + j] = e;
                                z += e;
                            }
                        }
                        for j in 0..seq {
                            out[base + j] /= z;
                        }
                    }
                }
            }
        }
        self.push(
            vec![batch, heads, seq, seq],
            out,
            Op::MaskedSoftmax {
                x: x.0,
                mask: mask.to_vec(),
                batch,
                heads,
                seq,
            },
        )
    }

    pub fn attn_context(
        &mut self,
        p: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        d_head: usize,
    ) -> NodeId {
        let hd = heads * d_head;
        let mut out = vec![0.0; batch * seq * hd];
        {
            let pv = &self.nodes[p.0].value;
            let vv = &self.nodes[v.0].value;
            for b in 0..batch {
                for h in 0..heads {
                    for i in 0..seq {
                        let pbase = ((b * heads + h) * seq + i) * seq;
                        let obase = (b * seq + i) * hd + h * d_head;
                        for j in 0..seq {
                            let w = pv[pbase + j];
                            if w == 0.0 {
                                continue;
                            }
                            let vbase = (b * seq + j) * hd + h * d_head;
                            for d in 0..d_head {
                                out[obase + d] += w * vv[vbase + d];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            vec![batch * seq, hd],
            out,
            Op::AttnContext {
                p: p.0,
                v: v.0,
                batch,
                seq,
                heads,
                d_head,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Relu { x: x.0 })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        let rows = self.nodes[x.0].value.len() / d;
        let mut out = vec![0.0; rows * d];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
                }
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    pub fn select_token0(&mut self, x: NodeId, batch: usize, seq: usize, dim: usize) -> NodeId {
        let mut out = vec![0.0; batch * dim];
        for b in 0..batch {
            let src = b * seq * dim;
            out[b * dim..(b + 1) * dim]
                .copy_from_slice(&self.nodes[x.0].value[src..src + dim]);
        }
        self.push(
            vec![batch, dim],
            out,
            Op::SelectToken0 {
                x: x.0,
                batch,
                seq,
                dim,
            },
        )
    }

    pub fn gate_heads(&mut self, x: NodeId, gates: NodeId, heads: usize, d_head: usize) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let hd = heads * d_head;
        let rows = self.nodes[x.0].value.len() / hd;
        let mut out = vec![0.0; rows * hd];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gates.0].value;
            for r in 0..rows {
                for h in 0..heads {
                    for d in 0..d_head {
                        let i = r * hd + h * d_head + d;
                        out[i] = xv[i] * gv[h];
                    }
                }
            }
        }
        self.push(
            shape,
            out,
            Op::GateHeads {
                x: x.0,
                gates: gates.0,
                heads,
                d_head,
            },
        )
    }

    pub fn gate_units(&mut self, x: NodeId, gates: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let u = *shape.last().unwrap();
        let rows = self.nodes[x.0].value.len() / u;
        let mut out = vec![0.0; rows * u];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gates.0].value;
            for r in 0..rows {
                for j in 0..u {
                    out[r * u + j] = xv[r * u + j] * gv[j];
                }
            }
        }
        self.push(
            shape,
            out,
            Op::GateUnits {
                x: x.0,
                gates: gates.0,
            },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let c = self.nodes[logits.0].shape[1];
        let b = labels.len();
        assert_eq!(self.nodes[logits.0].shape[0], b);
        let mut loss = 0.0;
        let mut probs = vec![0.0; c];
        for (i, &y) in labels.iter().enumerate() {
            let row = &self.nodes[logits.0].value[i * c..(i + 1) * c];
            softmax_row(row, &mut probs);
            loss -= probs[y].max(1e-300).ln();
        }
        loss /= b as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn soft_cross_entropy(&mut self, teacher: NodeId, student: NodeId) -> NodeId {
        assert_eq!(self.nodes[teacher.0].shape, self.nodes[student.0].shape);
        let c = self.nodes[teacher.0].shape[1];
        let b = self.nodes[teacher.0].shape[0];
        let mut loss = 0.0;
        let mut pt = vec![0.0; c];
        let mut ps = vec![0.0; c];
        for i in 0..b {
            let trow = &self.nodes[teacher.0].value[i * c..(i + 1) * c];
            let srow = &self.nodes[student.0].value[i * c..(i + 1) * c];
            softmax_row(trow, &mut pt);
            softmax_row(srow, &mut ps);
            for j in 0..c {
                loss -= pt[j] * ps[j].max(1e-300).ln();
            }
        }
        loss /= b as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::SoftCrossEntropy {
                teacher: teacher.0,
                student: student.0,
            },
        )
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let n = self.nodes[a.0].value.len();
        let mut loss = 0.0;
        for i in 0..n {
            let d = self.nodes[a.0].value[i] - self.nodes[b.0].value[i];
            loss += d * d;
        }
        loss /= n as f64;
        self.push(vec![1], vec![loss], Op::Mse { a: a.0, b: b.0 })
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut s = 0.0;
        for &(id, w) in terms {
            debug_assert_eq!(self.nodes[id.0].value.len(), 1);
            s += w * self.nodes[id.0].value[0];
        }
        self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                terms: terms.iter().map(|&(id, w)| (id.0, w)).collect(),
            },
        )
    }

    /// Backpropagate from a scalar loss, filling every node's grad buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Precondition("tape already consumed".into()));
        }
        if !self
            .nodes
            .iter()
            .any(|n| !matches!(n.op, Op::Leaf))
        {
            return Err(Error::Precondition("backward on empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Precondition("backward requires a scalar loss".into()));
        }
        self.consumed = true;
        for n in self.nodes.iter_mut() {
            for g in n.grad.iter_mut() {
                *g = 0.0;
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Embed { table, ids } => {
                    let d = self.nodes[table].shape[1];
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    for (i, &row) in ids.iter().enumerate() {
                        for j in 0..d {
                            self.nodes[table].grad[row * d + j] += dy[i * d + j];
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::Linear { x, w, b } => {
                    let d_in = *self.nodes[x].shape.last().unwrap();
                    let d_out = self.nodes[w].shape[1];
                    let rows = self.nodes[x].value.len() / d_in;
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let xv = self.nodes[x].value.clone();
                    let wv = self.nodes[w].value.clone();
                    for r in 0..rows {
                        for j in 0..d_out {
                            let g = dy[r * d_out + j];
                            if g == 0.0 {
                                continue;
                            }
                            self.nodes[b].grad[j] += g;
                            for i in 0..d_in {
                                self.nodes[x].grad[r * d_in + i] += g * wv[i * d_out + j];
                                self.nodes[w].grad[i * d_out + j] += g * xv[r * d_in + i];
                            }
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::AttnScores {
                    q,
                    k,
                    batch,
                    seq,
                    heads,
                    d_head,
                    scale,
                } => {
                    let hd = heads * d_head;
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let qv = self.nodes[q].value.clone();
                    let kv = self.nodes[k].value.clone();
                    for b in 0..batch {
                        for h in 0..heads {
                            for i in 0..seq {
                                for j in 0..seq {
                                    let g = dy[((b * heads + h) * seq + i) * seq + j] * scale;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let qo = (b * seq + i) * hd + h * d_head;
                                    let ko = (b * seq + j) * hd + h * d_head;
                                    for d in 0..d_head {
                                        self.nodes[q].grad[qo + d] += g * kv[ko + d];
                                        self.nodes[k].grad[ko + d] += g * qv[qo + d];
                                    }
                                }
                            }
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::MaskedSoftmax {
                    x,
                    mask,
                    batch,
                    heads,
                    seq,
                } => {
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let pv = self.nodes[idx].value.clone();
                    for b in 0..batch {
                        for h in 0..heads {
                            for i in 0..seq {
                                let base = ((b * heads + h) * seq + i) * seq;
                                let mut dot = 0.0;
                                for j in 0..seq {
                                    dot += pv[base + j] * dy[base + j];
                                }
                                for j in 0..seq {
                                    if mask[b * seq + j] {
                                        self.nodes[x].grad[base + j] +=
                                            pv[base + j] * (dy[base + j] - dot);
                                    }
                                }
                            }
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::AttnContext {
                    p,
                    v,
                    batch,
                    seq,
                    heads,
                    d_head,
                } => {
                    let hd = heads * d_head;
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let pv = self.nodes[p].value.clone();
                    let vv = self.nodes[v].value.clone();
                    for b in 0..batch {
                        for h in 0..heads {
                            for i in 0..seq {
                                let pbase = ((b * heads + h) * seq + i) * seq;
                                let obase = (b * seq + i) * hd + h * d_head;
                                for j in 0..seq {
                                    let vbase = (b * seq + j) * hd + h * d_head;
                                    let mut dp = 0.0;
                                    for d in 0..d_head {
                                        dp += dy[obase + d] * vv[vbase + d];
                                        self.nodes[v].grad[vbase + d] +=
                                            pv[pbase + j] * dy[obase + d];
                                    }
                                    self.nodes[p].grad[pbase + j] += dp;
                                }
                            }
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::Add { a, b } => {
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    for i in 0..dy.len() {
                        self.nodes[a].grad[i] += dy[i];
                        self.nodes[b].grad[i] += dy[i];
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::Mul { a, b } => {
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    for i in 0..dy.len() {
                        self.nodes[a].grad[i] += dy[i] * bv[i];
                        self.nodes[b].grad[i] += dy[i] * av[i];
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::Relu { x } => {
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    for i in 0..dy.len() {
                        if self.nodes[x].value[i] > 0.0 {
                            self.nodes[x].grad[i] += dy[i];
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.nodes[x].shape.last().unwrap();
                    let rows = self.nodes[x].value.len() / d;
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gamma].value.clone();
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_gdy = 0.0;
                        let mut sum_gdy_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let gdy = gv[j] * dy[r * d + j];
                            sum_gdy += gdy;
                            sum_gdy_xhat += gdy * xhat;
                            self.nodes[gamma].grad[j] += dy[r * d + j] * xhat;
                            self.nodes[beta].grad[j] += dy[r * d + j];
                        }
                        let m1 = sum_gdy / d as f64;
                        let m2 = sum_gdy_xhat / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            self.nodes[x].grad[r * d + j] +=
                                (gv[j] * dy[r * d + j] - m1 - xhat * m2) * inv;
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::SelectToken0 {
                    x,
                    batch,
                    seq,
                    dim,
                } => {
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    for b in 0..batch {
                        let dst = b * seq * dim;
                        for j in 0..dim {
                            self.nodes[x].grad[dst + j] += dy[b * dim + j];
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::GateHeads {
                    x,
                    gates,
                    heads,
                    d_head,
                } => {
                    let hd = heads * d_head;
                    let rows = self.nodes[x].value.len() / hd;
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gates].value.clone();
                    for r in 0..rows {
                        for h in 0..heads {
                            for d in 0..d_head {
                                let i = r * hd + h * d_head + d;
                                self.nodes[x].grad[i] += dy[i] * gv[h];
                                self.nodes[gates].grad[h] += dy[i] * xv[i];
                            }
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::GateUnits { x, gates } => {
                    let u = *self.nodes[x].shape.last().unwrap();
                    let rows = self.nodes[x].value.len() / u;
                    let dy = std::mem::take(&mut self.nodes[idx].grad);
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gates].value.clone();
                    for r in 0..rows {
                        for j in 0..u {
                            let i = r * u + j;
                            self.nodes[x].grad[i] += dy[i] * gv[j];
                            self.nodes[gates].grad[j] += dy[i] * xv[i];
                        }
                    }
                    self.nodes[idx].grad = dy;
                }
                Op::Sum { x } => {
                    let g = self.nodes[idx].grad[0];
                    for v in self.nodes[x].grad.iter_mut() {
                        *v += g;
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let c = self.nodes[logits].shape[1];
                    let bsz = labels.len();
                    let g = self.nodes[idx].grad[0];
                    let lv = self.nodes[logits].value.clone();
                    let mut probs = vec![0.0; c];
                    for (i, &y) in labels.iter().enumerate() {
                        softmax_row(&lv[i * c..(i + 1) * c], &mut probs);
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            self.nodes[logits].grad[i * c + j] +=
                                g * (probs[j] - onehot) / bsz as f64;
                        }
                    }
                }
                Op::SoftCrossEntropy { teacher, student } => {
                    let c = self.nodes[teacher].shape[1];
                    let bsz = self.nodes[teacher].shape[0];
                    let g = self.nodes[idx].grad[0];
                    let tv = self.nodes[teacher].value.clone();
                    let sv = self.nodes[student].value.clone();
                    let mut pt = vec![0.0; c];
                    let mut ps = vec![0.0; c];
                    for i in 0..bsz {
                        softmax_row(&tv[i * c..(i + 1) * c], &mut pt);
                        softmax_row(&sv[i * c..(i + 1) * c], &mut ps);
                        // d/dstudent: (ps - pt) / B
                        for j in 0..c {
                            self.nodes[student].grad[i * c + j] +=
                                g * (ps[j] - pt[j]) / bsz as f64;
                        }
                        // d/dteacher: -pt_j * (log ps_j - sum_k pt_k log ps_k) / B
                        let mut mean_lp = 0.0;
                        for k in 0..c {
                            mean_lp += pt[k] * ps[k].max(1e-300).ln();
                        }
                        for j in 0..c {
                            self.nodes[teacher].grad[i * c + j] -=
                                g * pt[j] * (ps[j].max(1e-300).ln() - mean_lp) / bsz as f64;
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let n = self.nodes[a].value.len();
                    let g = self.nodes[idx].grad[0];
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    for i in 0..n {
                        let d = 2.0 * (av[i] - bv[i]) / n as f64;
                        self.nodes[a].grad[i] += g * d;
                        self.nodes[b].grad[i] -= g * d;
                    }
                }
                Op::WeightedSum { terms } => {
                    let g = self.nodes[idx].grad[0];
                    for (id, w) in terms {
                        self.nodes[id].grad[0] += g * w;
                    }
                }
            }
        }
        Ok(())
    }
}
