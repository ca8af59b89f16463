//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op appends a node holding the produced tensor plus whatever context
//! its backward rule needs. Node ids are handed out in topological order, so
//! `backward` is a single reverse sweep with additive gradient accumulation.

use rand::Rng;

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
        lead: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    AddBias {
        x: NodeId,
        b: NodeId,
        axis: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        axis: usize,
        window: usize,
        stride: usize,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceAxis {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    BroadcastTo {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    BceLoss {
        pred: NodeId,
        target: Vec<f64>,
        clamped: Vec<f64>,
    },
    ReplaceQueryRow {
        x: NodeId,
        query: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation; create one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Decomposes `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input; gradient participation follows the tensor's flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Registers an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Copies a node's value out as a gradient-free tensor.
    pub fn detach(&self, id: NodeId) -> Tensor {
        let v = &self.nodes[id.0].value;
        Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("node tensor is consistent")
    }

    /// Gradient of a node after `backward`, if it required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.set_requires_grad(requires_grad);
        self.push(t, op)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].value.requires_grad())
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Matrix product with shared leading batch dimensions:
    /// `[lead.., M, K] · [lead.., K, N] -> [lead.., M, N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let mismatch = || {
            Error::shape(format!(
                "matmul: incompatible operand shapes {sa:?} and {sb:?}"
            ))
        };
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; lead * m * n];
        ops::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, lead, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(shape, out, rg, Op::Matmul { a, b, lead, m, k, n }))
    }

    // ── Convolutions ────────────────────────────────────────────────

    /// 1-D cross-correlation: `[B,Ci,T] * [Co,Ci,k] -> [B,Co,T']`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv1d: input {sx:?} incompatible with weight {sw:?}"
            )));
        }
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let t_out = ops::conv_out_len(t_in, k, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv1d: kernel {k} exceeds padded input {} (input {sx:?}, weight {sw:?})",
                t_in + 2 * pad
            ))
        })?;
        let mut out = vec![0.0; batch * c_out * t_out];
        ops::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            batch,
            c_in,
            t_in,
            c_out,
            k,
            stride,
            pad,
            t_out,
        );
        let rg = self.needs_grad(&[x, w]);
        Ok(self.push_op(vec![batch, c_out, t_out], out, rg, Op::Conv1d { x, w, stride, pad }))
    }

    /// 2-D cross-correlation over (freq, time):
    /// `[B,Ci,F,T] * [Co,Ci,kf,kt] -> [B,Co,F',T']`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d: input {sx:?} incompatible with weight {sw:?}"
            )));
        }
        let (batch, c_in, f_in, t_in) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kf, kt) = (sw[0], sw[2], sw[3]);
        let f_out = ops::conv_out_len(f_in, kf, stride.0, pad.0);
        let t_out = ops::conv_out_len(t_in, kt, stride.1, pad.1);
        let (f_out, t_out) = match (f_out, t_out) {
            (Some(f), Some(t)) => (f, t),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: kernel {kf}x{kt} exceeds padded input (input {sx:?}, weight {sw:?})"
                )))
            }
        };
        let mut out = vec![0.0; batch * c_out * f_out * t_out];
        ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            batch,
            c_in,
            f_in,
            t_in,
            c_out,
            kf,
            kt,
            stride,
            pad,
            f_out,
            t_out,
        );
        let rg = self.needs_grad(&[x, w]);
        Ok(self.push_op(
            vec![batch, c_out, f_out, t_out],
            out,
            rg,
            Op::Conv2d { x, w, stride, pad },
        ))
    }

    /// Adds a per-channel bias vector along `axis`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(Error::shape(format!(
                "add_bias: bias {sb:?} does not match axis {axis} of {sx:?}"
            )));
        }
        let (_, c, inner) = split_axis(&sx, axis);
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (idx, o) in out.iter_mut().enumerate() {
            *o += bias[(idx / inner) % c];
        }
        let rg = self.needs_grad(&[x, b]);
        Ok(self.push_op(sx, out, rg, Op::AddBias { x, b, axis }))
    }

    // ── Pooling ─────────────────────────────────────────────────────

    fn pool_check(&self, x: NodeId, axis: usize, window: usize, stride: usize) -> Result<(Vec<usize>, usize, usize, usize, usize)> {
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() {
            return Err(Error::shape(format!("pool: axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        if window == 0 || stride == 0 || window > len {
            return Err(Error::shape(format!(
                "pool: window {window} stride {stride} invalid for extent {len} of {sx:?}"
            )));
        }
        let out_len = (len - window) / stride + 1;
        Ok((sx, outer, len, inner, out_len))
    }

    /// Max pooling along one axis; ties route to the first index.
    pub fn maxpool(&mut self, x: NodeId, axis: usize, window: usize, stride: usize) -> Result<NodeId> {
        let (sx, outer, len, inner, out_len) = self.pool_check(x, axis, window, stride)?;
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * out_len * inner];
        let mut argmax = vec![0usize; out.len()];
        for o in 0..outer {
            for ol in 0..out_len {
                for i in 0..inner {
                    let base = o * len * inner + ol * stride * inner + i;
                    let mut best = data[base];
                    let mut best_idx = base;
                    for wj in 1..window {
                        let idx = base + wj * inner;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let oidx = (o * out_len + ol) * inner + i;
                    out[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
        let mut shape = sx;
        shape[axis] = out_len;
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, out, rg, Op::MaxPool { x, argmax }))
    }

    /// Mean pooling along one axis.
    pub fn avgpool(&mut self, x: NodeId, axis: usize, window: usize, stride: usize) -> Result<NodeId> {
        let (sx, outer, len, inner, out_len) = self.pool_check(x, axis, window, stride)?;
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * out_len * inner];
        let inv = 1.0 / window as f64;
        for o in 0..outer {
            for ol in 0..out_len {
                for i in 0..inner {
                    let base = o * len * inner + ol * stride * inner + i;
                    let mut s = 0.0;
                    for wj in 0..window {
                        s += data[base + wj * inner];
                    }
                    out[(o * out_len + ol) * inner + i] = s * inv;
                }
            }
        }
        let mut shape = sx;
        shape[axis] = out_len;
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, out, rg, Op::AvgPool { x, axis, window, stride }))
    }

    // ── Elementwise and normalization ───────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, out, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, out, rg, Op::Sigmoid { x })
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() {
            return Err(Error::shape(format!("softmax: axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(data[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (data[at(l)] - mx).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(sx, out, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis, epsilon 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let sx = self.value(x).shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm: scalar input"))?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last axis of {sx:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let rows = self.value(x).numel() / d;
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        let mut invstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            invstd[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push_op(sx, out, rg, Op::LayerNorm { x, gamma, beta, xhat, invstd }))
    }

    /// Batch normalization over channel axis 1 using batch statistics.
    /// Returns the node plus the per-channel batch mean and (biased) variance
    /// so the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        const EPS: f64 = 1e-5;
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return Err(Error::shape(format!("batch_norm: input {sx:?} has no channel axis")));
        }
        let c = sx[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm: gamma {:?} / beta {:?} do not match channel axis of {sx:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (outer, _, inner) = split_axis(&sx, 1);
        let n = (outer * inner) as f64;
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    s += data[base + i];
                }
            }
            let m = s / n;
            let mut v = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let d = data[base + i] - m;
                    v += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v / n;
        }
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        let mut invstd = vec![0.0; c];
        for ch in 0..c {
            invstd[ch] = 1.0 / (var[ch] + EPS).sqrt();
        }
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let xh = (data[base + i] - mean[ch]) * invstd[ch];
                    xhat[base + i] = xh;
                    out[base + i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        let id = self.push_op(sx, out, rg, Op::BatchNormTrain { x, gamma, beta, xhat, invstd });
        Ok((id, mean, var))
    }

    /// Batch normalization using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return Err(Error::shape(format!("batch_norm: input {sx:?} has no channel axis")));
        }
        let c = sx[1];
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::shape(format!(
                "batch_norm: parameter lengths do not match channel axis of {sx:?}"
            )));
        }
        let (outer, _, inner) = split_axis(&sx, 1);
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let invstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let xh = (data[base + i] - running_mean[ch]) * invstd[ch];
                    xhat[base + i] = xh;
                    out[base + i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push_op(sx, out, rg, Op::BatchNormEval { x, gamma, beta, xhat, invstd }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: mismatched shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(shape, out, rg, Op::Add { a, b }))
    }

    /// Adds `b` whose shape is a suffix of `a`'s shape (tiled over the rest).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape(format!(
                "add_broadcast: {sb:?} is not a trailing suffix of {sa:?}"
            )));
        }
        let bn = self.value(b).numel();
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for (idx, o) in out.iter_mut().enumerate() {
            *o += bd[idx % bn];
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(sa, out, rg, Op::AddBroadcast { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul: mismatched shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(shape, out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, out, rg, Op::Scale { x, c })
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat: no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (&a, &b))| d != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat: shape {sp:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.value(p).shape()[axis];
            let data = self.value(p).data();
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst = &mut out[(o * total + offset) * inner..(o * total + offset + len) * inner];
                dst.copy_from_slice(src);
            }
            offset += len;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push_op(shape, out, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice: [{start}, {start}+{len}) out of range on axis {axis} of {sx:?}"
            )));
        }
        let (outer, full, inner) = split_axis(&sx, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &data[(o * full + start) * inner..(o * full + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, out, rg, Op::SliceAxis { x, axis, start }))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let nd = sx.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute: {perm:?} is not a permutation of {sx:?} axes")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        permute_into(data, &sx, perm, &mut out, false);
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(out_shape, out, rg, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.value(x).shape()
            )));
        }
        let out = self.value(x).data().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, out, rg, Op::Reshape { x }))
    }

    /// Expands size-1 axes of `x` to the target shape (same rank).
    pub fn broadcast_to(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != shape.len()
            || sx.iter().zip(&shape).any(|(&a, &b)| a != b && a != 1)
        {
            return Err(Error::shape(format!("broadcast: {sx:?} cannot expand to {shape:?}")));
        }
        let data = self.value(x).data();
        let in_strides = row_major_strides(&sx);
        let eff: Vec<usize> = sx
            .iter()
            .zip(&in_strides)
            .zip(&shape)
            .map(|((&d, &s), &od)| if d == od { s } else { 0 })
            .collect();
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        let mut coords = vec![0usize; shape.len()];
        let mut in_idx = 0usize;
        for o in out.iter_mut() {
            *o = data[in_idx];
            for d in (0..shape.len()).rev() {
                coords[d] += 1;
                in_idx += eff[d];
                if coords[d] < shape[d] {
                    break;
                }
                in_idx -= eff[d] * shape[d];
                coords[d] = 0;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, out, rg, Op::BroadcastTo { x }))
    }

    // ── Regularization and reductions ───────────────────────────────

    /// Inverted dropout with keep-scale 1/(1−p); identity when p == 0.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, out, rg, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push_op(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n;
        let rg = self.needs_grad(&[x]);
        self.push_op(vec![1], vec![s], rg, Op::Mean { x })
    }

    /// Mean binary cross-entropy with predictions clamped to [1e-7, 1−1e-7].
    pub fn bce_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        const CLAMP: f64 = 1e-7;
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce_loss: prediction {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let p = self.value(pred).data();
        let t = target.data();
        let clamped: Vec<f64> = p.iter().map(|&v| v.clamp(CLAMP, 1.0 - CLAMP)).collect();
        let n = p.len() as f64;
        let loss = clamped
            .iter()
            .zip(t)
            .map(|(&pc, &tv)| -(tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln()))
            .sum::<f64>()
            / n;
        let rg = self.needs_grad(&[pred]);
        Ok(self.push_op(
            vec![1],
            vec![loss],
            rg,
            Op::BceLoss {
                pred,
                target: t.to_vec(),
                clamped,
            },
        ))
    }

    /// Replaces row `query` of every trailing [S_q, S_k] matrix with the given
    /// constant rows (`rows` holds lead·S_k values). Gradients do not flow
    /// through the replaced row.
    pub fn replace_query_row(&mut self, x: NodeId, query: usize, rows: Vec<f64>) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return Err(Error::shape(format!("replace_query_row: rank-{} input", sx.len())));
        }
        let sk = sx[sx.len() - 1];
        let sq = sx[sx.len() - 2];
        let lead: usize = sx[..sx.len() - 2].iter().product();
        if query >= sq || rows.len() != lead * sk {
            return Err(Error::shape(format!(
                "replace_query_row: query {query}, {} row values vs shape {sx:?}",
                rows.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for l in 0..lead {
            out[(l * sq + query) * sk..(l * sq + query + 1) * sk]
                .copy_from_slice(&rows[l * sk..(l + 1) * sk]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(sx, out, rg, Op::ReplaceQueryRow { x, query }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; populates `grad` on every node that
    /// requires gradients, leaves included.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            if self.nodes[id].value.requires_grad() {
                self.nodes[id].value.set_grad(g);
            }
        }
        Ok(())
    }

    /// Accumulates this node's output gradient into its inputs.
    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Fetch-or-init the gradient buffer of an input that wants gradients.
        macro_rules! gbuf {
            ($nid:expr) => {{
                let nid: NodeId = $nid;
                if self.nodes[nid.0].value.requires_grad() {
                    Some(
                        grads[nid.0]
                            .get_or_insert_with(|| vec![0.0; self.nodes[nid.0].value.numel()]),
                    )
                } else {
                    None
                }
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, lead, m, k, n } => {
                let (lead, m, k, n) = (*lead, *m, *k, *n);
                let a_data = self.nodes[a.0].value.data();
                let b_data = self.nodes[b.0].value.data();
                if let Some(da) = gbuf!(*a) {
                    // dA = dC · Bᵀ
                    ops::matmul_nt(g, b_data, da, lead, m, n, k);
                }
                if let Some(db) = gbuf!(*b) {
                    // dB = Aᵀ · dC
                    ops::matmul_tn(a_data, g, db, lead, m, k, n);
                }
            }
            Op::Conv1d { x, w, stride, pad } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
                let (c_out, k) = (sw[0], sw[2]);
                let t_out = self.nodes[id].value.shape()[2];
                let x_data = self.nodes[x.0].value.data();
                let w_data = self.nodes[w.0].value.data();
                let want_dx = self.nodes[x.0].value.requires_grad();
                let want_dw = self.nodes[w.0].value.requires_grad();
                let mut dx = if want_dx {
                    Some(std::mem::take(grads[x.0].get_or_insert_with(|| vec![0.0; x_data.len()])))
                } else {
                    None
                };
                let mut dw = if want_dw {
                    Some(std::mem::take(grads[w.0].get_or_insert_with(|| vec![0.0; w_data.len()])))
                } else {
                    None
                };
                ops::conv1d_backward(
                    x_data,
                    w_data,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    batch,
                    c_in,
                    t_in,
                    c_out,
                    k,
                    *stride,
                    *pad,
                    t_out,
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (batch, c_in, f_in, t_in) = (sx[0], sx[1], sx[2], sx[3]);
                let (c_out, kf, kt) = (sw[0], sw[2], sw[3]);
                let so = self.nodes[id].value.shape();
                let (f_out, t_out) = (so[2], so[3]);
                let x_data = self.nodes[x.0].value.data();
                let w_data = self.nodes[w.0].value.data();
                let want_dx = self.nodes[x.0].value.requires_grad();
                let want_dw = self.nodes[w.0].value.requires_grad();
                let mut dx = if want_dx {
                    Some(std::mem::take(grads[x.0].get_or_insert_with(|| vec![0.0; x_data.len()])))
                } else {
                    None
                };
                let mut dw = if want_dw {
                    Some(std::mem::take(grads[w.0].get_or_insert_with(|| vec![0.0; w_data.len()])))
                } else {
                    None
                };
                ops::conv2d_backward(
                    x_data,
                    w_data,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    batch,
                    c_in,
                    f_in,
                    t_in,
                    c_out,
                    kf,
                    kt,
                    *stride,
                    *pad,
                    f_out,
                    t_out,
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
            }
            Op::AddBias { x, b, axis } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (_, c, inner) = split_axis(&sx, *axis);
                if let Some(dx) = gbuf!(*x) {
                    for (dv, &gv) in dx.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if let Some(db) = gbuf!(*b) {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[(idx / inner) % c] += gv;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = gbuf!(*x) {
                    for (oidx, &iidx) in argmax.iter().enumerate() {
                        dx[iidx] += g[oidx];
                    }
                }
            }
            Op::AvgPool { x, axis, window, stride } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&sx, *axis);
                let out_len = self.nodes[id].value.shape()[*axis];
                let inv = 1.0 / *window as f64;
                if let Some(dx) = gbuf!(*x) {
                    for o in 0..outer {
                        for ol in 0..out_len {
                            for i in 0..inner {
                                let gv = g[(o * out_len + ol) * inner + i] * inv;
                                let base = o * len * inner + ol * stride * inner + i;
                                for wj in 0..*window {
                                    dx[base + wj * inner] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(dx) = gbuf!(*x) {
                    let xd = self.nodes[x.0].value.data();
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = gbuf!(*x) {
                    let y = self.nodes[id].value.data();
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = gbuf!(*x) {
                    let y = self.nodes[id].value.data();
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let (outer, len, inner) = split_axis(&sx, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                dot += g[at(l)] * y[at(l)];
                            }
                            for l in 0..len {
                                dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, invstd } => {
                let d = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = xhat.len() / d;
                let gm = self.nodes[gamma.0].value.data();
                if let Some(dgamma) = gbuf!(*gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dgamma[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(dbeta) = gbuf!(*beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            dbeta[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = gbuf!(*x) {
                    let dn = d as f64;
                    for r in 0..rows {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gm[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gm[j];
                            dx[r * d + j] += invstd[r] / dn
                                * (dn * dxh - sum_dxh - xhat[r * d + j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, invstd } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (outer, c, inner) = split_axis(&sx, 1);
                let n = (outer * inner) as f64;
                let gm = self.nodes[gamma.0].value.data();
                if let Some(dgamma) = gbuf!(*gamma) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let mut s = 0.0;
                            for i in 0..inner {
                                s += g[base + i] * xhat[base + i];
                            }
                            dgamma[ch] += s;
                        }
                    }
                }
                if let Some(dbeta) = gbuf!(*beta) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let mut s = 0.0;
                            for i in 0..inner {
                                s += g[base + i];
                            }
                            dbeta[ch] += s;
                        }
                    }
                }
                if let Some(dx) = gbuf!(*x) {
                    // Per channel: dx = invstd/N · (N·dxh − Σdxh − xh·Σ(dxh·xh))
                    let mut sum_dxh = vec![0.0; c];
                    let mut sum_dxh_xh = vec![0.0; c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                let dxh = g[base + i] * gm[ch];
                                sum_dxh[ch] += dxh;
                                sum_dxh_xh[ch] += dxh * xhat[base + i];
                            }
                        }
                    }
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                let dxh = g[base + i] * gm[ch];
                                dx[base + i] += invstd[ch] / n
                                    * (n * dxh - sum_dxh[ch] - xhat[base + i] * sum_dxh_xh[ch]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, invstd } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (outer, c, inner) = split_axis(&sx, 1);
                let gm = self.nodes[gamma.0].value.data();
                if let Some(dgamma) = gbuf!(*gamma) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                dgamma[ch] += g[base + i] * xhat[base + i];
                            }
                        }
                    }
                }
                if let Some(dbeta) = gbuf!(*beta) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                dbeta[ch] += g[base + i];
                            }
                        }
                    }
                }
                if let Some(dx) = gbuf!(*x) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let f = gm[ch] * invstd[ch];
                            for i in 0..inner {
                                dx[base + i] += g[base + i] * f;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = gbuf!(*a) {
                    for (dv, &gv) in da.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if let Some(db) = gbuf!(*b) {
                    for (dv, &gv) in db.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if let Some(da) = gbuf!(*a) {
                    for (dv, &gv) in da.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if let Some(db) = gbuf!(*b) {
                    let bn = db.len();
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % bn] += gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                if let Some(da) = gbuf!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if let Some(db) = gbuf!(*b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = gbuf!(*x) {
                    for (dv, &gv) in dx.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let so = self.nodes[id].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&so, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(dp) = gbuf!(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                            for (dv, &gv) in dst.iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                if let Some(dx) = gbuf!(*x) {
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let (outer, full, inner) = split_axis(&sx, *axis);
                    let len = self.nodes[id].value.shape()[*axis];
                    for o in 0..outer {
                        let dst = &mut dx[(o * full + start) * inner..(o * full + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (dv, &gv) in dst.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(dx) = gbuf!(*x) {
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    permute_into(g, &sx, perm, dx, true);
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = gbuf!(*x) {
                    for (dv, &gv) in dx.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::BroadcastTo { x } => {
                if let Some(dx) = gbuf!(*x) {
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let so = self.nodes[id].value.shape().to_vec();
                    let in_strides = row_major_strides(&sx);
                    let eff: Vec<usize> = sx
                        .iter()
                        .zip(&in_strides)
                        .zip(&so)
                        .map(|((&d, &s), &od)| if d == od { s } else { 0 })
                        .collect();
                    let mut coords = vec![0usize; so.len()];
                    let mut in_idx = 0usize;
                    for &gv in g {
                        dx[in_idx] += gv;
                        for d in (0..so.len()).rev() {
                            coords[d] += 1;
                            in_idx += eff[d];
                            if coords[d] < so[d] {
                                break;
                            }
                            in_idx -= eff[d] * so[d];
                            coords[d] = 0;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = gbuf!(*x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = gbuf!(*x) {
                    let gv = g[0];
                    for dv in dx.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = gbuf!(*x) {
                    let gv = g[0] / dx.len() as f64;
                    for dv in dx.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::BceLoss { pred, target, clamped } => {
                if let Some(dp) = gbuf!(*pred) {
                    let p_raw = self.nodes[pred.0].value.data();
                    let n = clamped.len() as f64;
                    let gv = g[0];
                    for i in 0..clamped.len() {
                        // Clamp saturates: no gradient outside its range.
                        if p_raw[i] != clamped[i] {
                            continue;
                        }
                        let p = clamped[i];
                        dp[i] += gv * (p - target[i]) / (p * (1.0 - p)) / n;
                    }
                }
            }
            Op::ReplaceQueryRow { x, query } => {
                if let Some(dx) = gbuf!(*x) {
                    let sx = self.nodes[x.0].value.shape();
                    let sk = sx[sx.len() - 1];
                    let sq = sx[sx.len() - 2];
                    let lead: usize = sx[..sx.len() - 2].iter().product();
                    for l in 0..lead {
                        for q in 0..sq {
                            if q == *query {
                                continue;
                            }
                            let base = (l * sq + q) * sk;
                            for j in 0..sk {
                                dx[base + j] += g[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies `src` (shape `in_shape`) permuted by `perm` into `dst`.
/// With `accumulate` the mapping is inverted: dst is the un-permuted buffer
/// receiving `+=` contributions from the permuted `src`.
fn permute_into(src: &[f64], in_shape: &[usize], perm: &[usize], dst: &mut [f64], accumulate: bool) {
    let in_strides = row_major_strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let mut coords = vec![0usize; nd];
    let mut in_idx = 0usize;
    let numel: usize = out_shape.iter().product();
    for out_idx in 0..numel {
        if accumulate {
            dst[in_idx] += src[out_idx];
        } else {
            dst[out_idx] = src[in_idx];
        }
        for d in (0..nd).rev() {
            coords[d] += 1;
            in_idx += mapped[d];
            if coords[d] < out_shape[d] {
                break;
            }
            in_idx -= mapped[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}
