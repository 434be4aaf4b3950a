//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep. Gradients flow
//! only into nodes that transitively depend on a leaf created with
//! `requires_grad = true`; frozen parameters cost nothing on the way back.

use rand::Rng;

use super::kernels;
use super::{Mode, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        n: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        d: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    SplitHeads {
        x: NodeId,
        dims: [usize; 4],
    },
    MergeHeads {
        x: NodeId,
        dims: [usize; 4],
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        dims: [usize; 4],
        transpose_b: bool,
    },
    AddKeyMask {
        x: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        dim: usize,
    },
    SelectFirst {
        x: NodeId,
        batch: usize,
        seq: usize,
        d: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    MeanSquaredError {
        pred: NodeId,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward computation. Not shared across threads while recording.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(a: &[usize], b: &[usize], context: &'static str) -> TensorError {
    TensorError::Shape {
        left: a.to_vec(),
        right: b.to_vec(),
        context,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input tensor. Any gradient slot on `value` is dropped.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        value.grad = None;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// `a[…×k] · b[k×n]`; leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err(&sa, &sb, "matmul"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k.max(1);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Dense layer `x · wᵀ + bias` with `w[out×in]`, matching the stored weight layout.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || *sx.last().unwrap() != sw[1] {
            return Err(shape_err(&sx, &sw, "linear"));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out] {
                return Err(shape_err(self.shape(b), &[out], "linear bias"));
            }
        }
        let rows = sx.iter().product::<usize>() / inp.max(1);
        let mut data = vec![0.0; rows * out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in data.chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        kernels::matmul_nt_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut data,
            rows,
            inp,
            out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Linear {
                x,
                w,
                bias,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(self.shape(a), self.shape(b), context));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a * factor).collect(),
            grad: None,
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| kernels::gelu(a)).collect(),
            grad: None,
        };
        let rg = self.rg(x);
        self.push(t, Op::Gelu { x }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a.tanh()).collect(),
            grad: None,
        };
        let rg = self.rg(x);
        self.push(t, Op::Tanh { x }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.last_dim();
        if n == 0 {
            return Err(TensorError::EmptyDimension);
        }
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: kernels::softmax_rows(v.data(), n),
            grad: None,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, n }, rg))
    }

    /// Layer normalization over the last dimension with population variance.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = sx.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(TensorError::EmptyDimension);
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(&sx, self.shape(gamma), "layer_norm affine"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                d,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
            grad: None,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// `[B, S, H·Dh] → [B, H, S, Dh]`
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(shape_err(&s, &[heads], "split_heads"));
        }
        let (b, sq, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..sq {
                for h in 0..heads {
                    let from = (bi * sq + t) * d + h * dh;
                    let to = ((bi * heads + h) * sq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, heads, sq, dh], out)?,
            Op::SplitHeads {
                x,
                dims: [b, heads, sq, dh],
            },
            rg,
        ))
    }

    /// `[B, H, S, Dh] → [B, S, H·Dh]`
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(&s, &[], "merge_heads"));
        }
        let (b, heads, sq, dh) = (s[0], s[1], s[2], s[3]);
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..sq {
                    let from = ((bi * heads + h) * sq + t) * dh;
                    let to = (bi * sq + t) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, sq, d], out)?,
            Op::MergeHeads {
                x,
                dims: [b, heads, sq, dh],
            },
            rg,
        ))
    }

    /// Batched product over all leading dims: `a[…, m, k] · b[…, k, n]`, or
    /// `a[…, m, k] · b[…, n, k]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] {
            return Err(shape_err(&sa, &sb, "batch_matmul"));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if transpose_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(shape_err(&sa, &sb, "batch_matmul"));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let (ai, bi) = (&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n]);
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                kernels::matmul_nt_acc(ai, bi, ci, m, k, n);
            } else {
                kernels::matmul_acc(ai, bi, ci, m, k, n);
            }
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchMatMul {
                a,
                b,
                dims: [batch, m, k, n],
                transpose_b,
            },
            rg,
        ))
    }

    /// Add `key_bias[B×S]` to attention scores `[B, H, S, S]` along the key axis.
    pub fn add_key_mask(&mut self, scores: NodeId, key_bias: &[f64]) -> Result<NodeId> {
        let s = self.shape(scores).to_vec();
        if s.len() != 4 || key_bias.len() != s[0] * s[3] {
            return Err(shape_err(&s, &[key_bias.len()], "add_key_mask"));
        }
        let (b, h, q, k) = (s[0], s[1], s[2], s[3]);
        let mut out = self.value(scores).data().to_vec();
        for bi in 0..b {
            let kb = &key_bias[bi * k..(bi + 1) * k];
            for row in out[bi * h * q * k..(bi + 1) * h * q * k].chunks_mut(k) {
                for (v, m) in row.iter_mut().zip(kb) {
                    *v += m;
                }
            }
        }
        let rg = self.rg(scores);
        Ok(self.push(Tensor::new(s, out)?, Op::AddKeyMask { x: scores }, rg))
    }

    /// Row lookup `table[V×d]` at `ids`, output shape `out_shape ++ [d]`.
    pub fn embedding(
        &mut self,
        table: NodeId,
        ids: &[usize],
        out_shape: &[usize],
    ) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err(&st, out_shape, "embedding"));
        }
        let (vocab, dim) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= vocab {
                return Err(TensorError::Index {
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// `[B, S, d] → [B, d]`, keeping position 0.
    pub fn select_first(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(shape_err(&s, &[], "select_first"));
        }
        let (b, seq, d) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&src[bi * seq * d..bi * seq * d + d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::SelectFirst { x, batch: b, seq, d },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(shape_err(&s, &[targets.len()], "cross_entropy"));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                index: bad,
                size: c,
            });
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let p = probs[i * c + t];
                // `f64::max` would swallow a NaN probability.
                if p.is_nan() {
                    p
                } else {
                    -p.max(f64::MIN_POSITIVE).ln()
                }
            })
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                classes: c,
            },
            rg,
        ))
    }

    /// Mean squared error of `pred` (any shape with `targets.len()` elements).
    pub fn mse(&mut self, pred: NodeId, targets: &[f64]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != targets.len() || p.is_empty() {
            return Err(shape_err(self.shape(pred), &[targets.len()], "mse"));
        }
        let loss = p
            .iter()
            .zip(targets)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MeanSquaredError {
                pred,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, filling every reachable gradient slot.
    /// Previous gradients are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Split borrow: ops are read from `nodes`, gradients written to `grads`.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |id: NodeId| nodes[id.0].value.data();
        let mut pending: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, val(*b), &mut ga, m, n, k);
                    pending.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(val(*a), g, &mut gb, k, m, n);
                    pending.push((*b, gb));
                }
            }
            Op::Linear {
                x,
                w,
                bias,
                rows,
                inp,
                out,
            } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                if wants(*x) {
                    let mut gx = vec![0.0; rows * inp];
                    kernels::matmul_acc(g, val(*w), &mut gx, rows, out, inp);
                    pending.push((*x, gx));
                }
                if wants(*w) {
                    let mut gw = vec![0.0; out * inp];
                    kernels::matmul_tn_acc(g, val(*x), &mut gw, out, rows, inp);
                    pending.push((*w, gw));
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let mut gb = vec![0.0; out];
                        for row in g.chunks(out) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        pending.push((*b, gb));
                    }
                }
            }
            Op::Add { a, b } => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                pending.push((*a, g.iter().zip(val(*b)).map(|(g, v)| g * v).collect()));
                pending.push((*b, g.iter().zip(val(*a)).map(|(g, v)| g * v).collect()));
            }
            Op::Scale { x, factor } => {
                pending.push((*x, g.iter().map(|v| v * factor).collect()));
            }
            Op::Sum { x } => {
                let n = nodes[x.0].value.numel();
                pending.push((*x, vec![g[0]; n]));
            }
            Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                pending.push((*x, gx));
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let gx = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                pending.push((*x, gx));
            }
            Op::Softmax { x, n } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(*n).zip(g.chunks(*n)).zip(gx.chunks_mut(*n)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..*n {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                pending.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                d,
            } => {
                let d = *d;
                let gv = val(*gamma);
                if wants(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = kernels::dot(&dh, hr) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    pending.push((*x, gx));
                }
                if wants(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    pending.push((*gamma, gg));
                }
                if wants(*beta) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    pending.push((*beta, gb));
                }
            }
            Op::Dropout { x, mask } => {
                pending.push((*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::SplitHeads { x, dims } => {
                let [b, heads, sq, dh] = *dims;
                let d = heads * dh;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for t in 0..sq {
                        for h in 0..heads {
                            let to = (bi * sq + t) * d + h * dh;
                            let from = ((bi * heads + h) * sq + t) * dh;
                            gx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::MergeHeads { x, dims } => {
                let [b, heads, sq, dh] = *dims;
                let d = heads * dh;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for h in 0..heads {
                        for t in 0..sq {
                            let to = ((bi * heads + h) * sq + t) * dh;
                            let from = (bi * sq + t) * d + h * dh;
                            gx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::BatchMatMul {
                a,
                b,
                dims,
                transpose_b,
            } => {
                let [batch, m, k, n] = *dims;
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // C = A Bᵀ, B[n×k]: dA = dC · B
                            kernels::matmul_acc(gi, bi, out, m, n, k);
                        } else {
                            // C = A B, B[k×n]: dA = dC · Bᵀ
                            kernels::matmul_nt_acc(gi, bi, out, m, n, k);
                        }
                    }
                    pending.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB[n×k] = dCᵀ · A
                            kernels::matmul_tn_acc(gi, ai, out, n, m, k);
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            kernels::matmul_tn_acc(ai, gi, out, k, m, n);
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::AddKeyMask { x } => pending.push((*x, g.to_vec())),
            Op::Embedding { table, ids, dim } => {
                if wants(*table) {
                    let mut gt = vec![0.0; nodes[table.0].value.numel()];
                    for (row, &id) in g.chunks(*dim).zip(ids) {
                        for (s, v) in gt[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    pending.push((*table, gt));
                }
            }
            Op::SelectFirst { x, batch, seq, d } => {
                let mut gx = vec![0.0; batch * seq * d];
                for bi in 0..*batch {
                    gx[bi * seq * d..bi * seq * d + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                pending.push((*x, gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
            } => {
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * classes + t] -= scale;
                }
                pending.push((*logits, gl));
            }
            Op::MeanSquaredError { pred, targets } => {
                let scale = 2.0 * g[0] / targets.len() as f64;
                let gp = val(*pred)
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                pending.push((*pred, gp));
            }
        }
        self.nodes = nodes;
        for (id, grad) in pending {
            self.acc(id, |slot| {
                for (s, v) in slot.iter_mut().zip(&grad) {
                    *s += v;
                }
            });
        }
    }
}
