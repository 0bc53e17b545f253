//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass; calling
//! [`Graph::backward`] walks the tape in reverse. Graphs are cheap and
//! meant to be rebuilt for every step.

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, Tensor};
use crate::recolor::kernels as quant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Selu(Var),
    Abs(Var),
    Mfm(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    DwConv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool { x: Var, idx: Vec<u32> },
    Upsample2(Var),
    Shift { x: Var, axis: usize, groups: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32>, batch_stats: bool },
    InstanceNorm { x: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    SumAll(Var),
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, idx: Vec<u32> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    CrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize>, weights: Vec<f32> },
    MsePerSample(Var, Var),
    QuantizeSoft { logits: Var, palette: Var, tau: f32, weights: Vec<f32> },
    PairwiseMul(Var),
    GatherRows { x: Var, idx: Vec<usize>, k: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`], kept for leaves only.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    running_updates: Vec<(ParamId, Tensor)>,
}

const BN_EPS: f32 = 1e-5;
const SELU_ALPHA: f32 = 1.673_263_2;
const SELU_SCALE: f32 = 1.050_701;

impl Graph {
    /// `training` selects batch statistics in normalization layers.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            running_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is kept (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a parameter; tracked only if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    /// Normalization statistics gathered during a training forward pass.
    pub fn take_running_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.running_updates)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        let mut out = Vec::with_capacity(ta.len());
        for_each_bcast(ta.shape(), tb.shape(), |ia, ib| out.push(f(ta.data()[ia], tb.data()[ib])));
        Tensor::new(ta.shape(), out)
    }

    /// `a + b`, with `b` broadcast over size-1 axes of equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn selu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |v| if v > 0.0 { SELU_SCALE * v } else { SELU_SCALE * SELU_ALPHA * (v.exp() - 1.0) },
            Op::Selu(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    /// Max-Feature-Map: elementwise max of the two halves of axis 1.
    pub fn mfm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (outer, c, inner) = axis_split(x.shape(), 1);
        assert!(c % 2 == 0, "MFM needs an even channel count, got {c}");
        let half = c / 2;
        let mut out = Vec::with_capacity(x.len() / 2);
        for o in 0..outer {
            let base = o * c * inner;
            for i in 0..half * inner {
                out.push(x.data()[base + i].max(x.data()[base + half * inner + i]));
            }
        }
        let mut shape = x.shape().to_vec();
        shape[1] = half;
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Mfm(a), ng)
    }

    // ----- spatial -----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let t = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let t = kernels::dwconv_forward(self.value(x), self.value(w), self.value(b), pad);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::DwConv2d { x, w, b, pad }, ng)
    }

    pub fn maxpool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (t, idx) = kernels::maxpool_forward(self.value(x), k, stride, pad);
        let ng = self.ng(x);
        self.push(t, Op::MaxPool { x, idx }, ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = kernels::upsample2_forward(self.value(x));
        let ng = self.ng(x);
        self.push(t, Op::Upsample2(x), ng)
    }

    /// Shifts channel groups of `[N,C,H,W]` along axis 2 or 3 (zero fill).
    pub fn shift(&mut self, x: Var, axis: usize, groups: usize) -> Var {
        assert!(axis == 2 || axis == 3);
        let t = kernels::shift_channels(self.value(x), axis, groups, false);
        let ng = self.ng(x);
        self.push(t, Op::Shift { x, axis, groups }, ng)
    }

    // ----- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = permute(self.value(x), perm);
        let ng = self.ng(x);
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let t = concat(&parts, axis);
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(t, Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let (outer, n, inner) = axis_split(src.shape(), axis);
        assert!(start + len <= n, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::Slice { x, axis, start }, ng)
    }

    /// Per-batch row gather: `x: [B,n,d]`, `idx` holds `k` row indices per batch.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>, k: usize) -> Var {
        let src = self.value(x);
        let (b, n, d) = (src.dim(0), src.dim(1), src.dim(2));
        assert_eq!(idx.len(), b * k);
        let mut out = Vec::with_capacity(b * k * d);
        for bi in 0..b {
            for &r in &idx[bi * k..(bi + 1) * k] {
                assert!(r < n);
                let base = (bi * n + r) * d;
                out.extend_from_slice(&src.data()[base..base + d]);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, k, d], out), Op::GatherRows { x, idx, k }, ng)
    }

    // ----- linear algebra ----------------------------------------------

    /// Batched `op(a) · op(b)` over `[B,M,K]`-style operands; a batch size
    /// of 1 broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let (ba, bb) = (at.dim(0), bt.dim(0));
        let batch = ba.max(bb);
        assert!(ba == batch || ba == 1);
        assert!(bb == batch || bb == 1);
        let (m, ka) = if ta { (at.dim(2), at.dim(1)) } else { (at.dim(1), at.dim(2)) };
        let (kb, n) = if tb { (bt.dim(2), bt.dim(1)) } else { (bt.dim(1), bt.dim(2)) };
        assert_eq!(ka, kb, "matmul inner dimension mismatch");
        let mut out = vec![0.0f32; batch * m * n];
        let (sa, sb) = (at.dim(1) * at.dim(2), bt.dim(1) * bt.dim(2));
        for i in 0..batch {
            let a_s = &at.data()[(i % ba) * sa..(i % ba + 1) * sa];
            let b_s = &bt.data()[(i % bb) * sb..(i % bb + 1) * sb];
            kernels::gemm(
                m,
                ka,
                n,
                op_view(a_s, m, ka, ta),
                op_view(b_s, ka, n, tb),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[batch, m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `x · wᵀ + b` over the last axis; `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        let (o, i) = (wt.dim(0), wt.dim(1));
        assert_eq!(*xt.shape().last().unwrap(), i, "linear input width mismatch");
        let rows = xt.len() / i;
        let mut out = vec![0.0f32; rows * o];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in out.chunks_mut(o) {
                r.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(rows, i, o, kernels::Mat::rows(xt.data(), i), kernels::Mat::t(wt.data(), i), beta, &mut out);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().unwrap();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(src.shape(), out), Op::SoftmaxLast(x), ng)
    }

    // ----- normalization -----------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0f32; src.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + BN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(src.shape(), out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Batch normalization over axis 1 of `[N,C,...]`. Training graphs use
    /// batch statistics and queue running-stat updates; inference graphs
    /// use the stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: (ParamId, &Tensor),
        running_var: (ParamId, &Tensor),
    ) -> Var {
        let src = self.value(x);
        let (n, c, inner) = axis_split(src.shape(), 1);
        let count = (n * inner) as f32;
        let (mean, var): (Vec<f32>, Vec<f32>) = if self.training {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for o in 0..n {
                    let base = (o * c + ch) * inner;
                    s += src.data()[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0f64;
                for o in 0..n {
                    let base = (o * c + ch) * inner;
                    ss += src.data()[base..base + inner]
                        .iter()
                        .map(|&v| (v as f64 - m) * (v as f64 - m))
                        .sum::<f64>();
                }
                mean[ch] = m as f32;
                var[ch] = (ss / count as f64) as f32;
            }
            (mean, var)
        } else {
            (running_mean.1.data().to_vec(), running_var.1.data().to_vec())
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        for o in 0..n {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (src.data()[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        let shape = src.shape().to_vec();
        if self.training {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.running_updates.push((running_mean.0, Tensor::new(&[c], mean)));
            self.running_updates
                .push((running_var.0, Tensor::new(&[c], var.iter().map(|v| v * unbias).collect())));
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = self.training;
        self.push(
            Tensor::new(&shape, out),
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats },
            ng,
        )
    }

    /// Standardizes every `(n, c)` plane of `[N,C,...]` to zero mean and
    /// unit variance.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (n, c, inner) = axis_split(src.shape(), 1);
        let mut xhat = vec![0.0f32; src.len()];
        let mut rstd = vec![0.0f32; n * c];
        for p in 0..n * c {
            let plane = &src.data()[p * inner..(p + 1) * inner];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / inner as f64;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / inner as f64;
            let rs = 1.0 / (var as f32 + BN_EPS).sqrt();
            rstd[p] = rs;
            for (i, &v) in plane.iter().enumerate() {
                xhat[p * inner + i] = (v - mean as f32) * rs;
            }
        }
        let t = Tensor::new(src.shape(), xhat.clone());
        let ng = self.ng(x);
        self.push(t, Op::InstanceNorm { x, xhat, rstd }, ng)
    }

    // ----- reductions & losses -----------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f32;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let src = self.value(x);
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src.data()[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f32;
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::MeanAxis { x, axis }, ng)
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Var {
        let src = self.value(x);
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        let mut idx = vec![0u32; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let v = src.data()[base + i];
                    if j == 0 || v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        idx[o * inner + i] = (base + i) as u32;
                    }
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::MaxAxis { x, idx }, ng)
    }

    /// Weighted mean cross-entropy of `logits: [N,C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f32]) -> Var {
        let src = self.value(logits);
        let (n, c) = (src.dim(0), src.dim(1));
        assert_eq!(labels.len(), n);
        assert_eq!(weights.len(), n);
        let wsum: f32 = weights.iter().sum();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &src.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += (weights[r] * (lse - row[labels[r]])) as f64;
        }
        let loss = if wsum > 0.0 { loss as f32 / wsum } else { 0.0 };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        )
    }

    /// Mean squared error per leading-axis sample; returns `[N]`.
    pub fn mse_per_sample(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = ta.dim(0);
        let per = ta.len() / n;
        let out: Vec<f32> = (0..n)
            .map(|s| {
                let sa = &ta.data()[s * per..(s + 1) * per];
                let sb = &tb.data()[s * per..(s + 1) * per];
                (sa.iter().zip(sb).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / per as f64) as f32
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[n], out), Op::MsePerSample(a, b), ng)
    }

    // ----- model-specific ----------------------------------------------

    /// Temperature-softmax colour assignment: `logits: [N,K,H,W]`,
    /// `palette: [N,K,3]` → `[N,3,H,W]`.
    pub fn quantize_soft(&mut self, logits: Var, palette: Var, tau: f32) -> Var {
        let (lt, pt) = (self.value(logits), self.value(palette));
        let (n, k, h, w) = (lt.dim(0), lt.dim(1), lt.dim(2), lt.dim(3));
        assert_eq!(pt.shape(), &[n, k, 3], "palette shape mismatch");
        let pixels = h * w;
        let mut out = vec![0.0f32; n * 3 * pixels];
        let mut weights = vec![0.0f32; n * k * pixels];
        for s in 0..n {
            quant::soft_assign(
                &lt.data()[s * k * pixels..(s + 1) * k * pixels],
                &pt.data()[s * k * 3..(s + 1) * k * 3],
                k,
                pixels,
                tau,
                &mut out[s * 3 * pixels..(s + 1) * 3 * pixels],
                &mut weights[s * k * pixels..(s + 1) * k * pixels],
            );
        }
        let ng = self.ng(logits) || self.ng(palette);
        self.push(
            Tensor::new(&[n, 3, h, w], out),
            Op::QuantizeSoft { logits, palette, tau, weights },
            ng,
        )
    }

    /// Argmax colour assignment (no gradient).
    pub fn quantize_hard(&mut self, logits: Var, palette: Var) -> Var {
        let (lt, pt) = (self.value(logits), self.value(palette));
        let (n, k, h, w) = (lt.dim(0), lt.dim(1), lt.dim(2), lt.dim(3));
        let pixels = h * w;
        let mut out = vec![0.0f32; n * 3 * pixels];
        for s in 0..n {
            quant::hard_assign(
                &lt.data()[s * k * pixels..(s + 1) * k * pixels],
                &pt.data()[s * k * 3..(s + 1) * k * 3],
                k,
                pixels,
                &mut out[s * 3 * pixels..(s + 1) * 3 * pixels],
            );
        }
        self.input(Tensor::new(&[n, 3, h, w], out))
    }

    /// `[B,n,d]` → `[B,n,n,d]` with `out[b,i,j] = x[b,i] ⊙ x[b,j]`.
    pub fn pairwise_mul(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (b, n, d) = (src.dim(0), src.dim(1), src.dim(2));
        let mut out = vec![0.0f32; b * n * n * d];
        for bi in 0..b {
            for i in 0..n {
                let xi = &src.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                for j in 0..n {
                    let xj = &src.data()[(bi * n + j) * d..(bi * n + j + 1) * d];
                    let o = ((bi * n + i) * n + j) * d;
                    for k in 0..d {
                        out[o + k] = xi[k] * xj[k];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, n, n, d], out), Op::PairwiseMul(x), ng)
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    /// Gradients of trainable parameters that took part in the graph.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                if let Some(slot) = out.iter_mut().find(|(pid, _)| *pid == id) {
                    slot.1.add_assign(g);
                } else {
                    out.push((id, g.clone()));
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn unbroadcast(&self, g: &Tensor, target: Var) -> Tensor {
        let shape = self.shape(target);
        if g.shape() == shape {
            return g.clone();
        }
        let mut out = vec![0.0f32; shape.iter().product()];
        for_each_bcast(g.shape(), shape, |ia, ib| out[ib] += g.data()[ia]);
        Tensor::new(shape, out)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let gb = self.unbroadcast(g, *b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let gb = self.unbroadcast(&g.map(|v| -v), *b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Vec::with_capacity(g.len());
                    if ta.shape() == tb.shape() {
                        ga.extend(g.data().iter().zip(tb.data()).map(|(x, y)| x * y));
                    } else {
                        for_each_bcast(ta.shape(), tb.shape(), |ia, ib| ga.push(g.data()[ia] * tb.data()[ib]));
                    }
                    self.acc(grads, *a, Tensor::new(ta.shape(), ga));
                }
                if self.ng(*b) {
                    let prod = Tensor::new(
                        ta.shape(),
                        g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                    );
                    let gb = self.unbroadcast(&prod, *b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, zip_map(g, x, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(a) => self.acc(grads, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Selu(a) => {
                let x = self.value(*a);
                self.acc(
                    grads,
                    *a,
                    zip_map(g, x, |gv, xv| {
                        if xv > 0.0 {
                            gv * SELU_SCALE
                        } else {
                            gv * SELU_SCALE * SELU_ALPHA * xv.exp()
                        }
                    }),
                );
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, zip_map(g, x, |gv, xv| if xv >= 0.0 { gv } else { -gv }));
            }
            Op::Mfm(a) => {
                let x = self.value(*a);
                let (outer, c, inner) = axis_split(x.shape(), 1);
                let half = c / 2;
                let mut gx = vec![0.0f32; x.len()];
                for o in 0..outer {
                    let base = o * c * inner;
                    for i in 0..half * inner {
                        let (lo, hi) = (base + i, base + half * inner + i);
                        let gv = g.data()[o * half * inner + i];
                        if x.data()[lo] >= x.data()[hi] {
                            gx[lo] += gv;
                        } else {
                            gx[hi] += gv;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(x.shape(), gx));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::DwConv2d { x, w, b, pad } => {
                let (dx, dw, db) = kernels::dwconv_backward(self.value(*x), self.value(*w), g, *pad);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::MaxPool { x, idx } => {
                let mut gx = vec![0.0f32; self.value(*x).len()];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i as usize] += g.data()[o];
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::Upsample2(x) => self.acc(grads, *x, kernels::upsample2_backward(g, self.shape(*x))),
            Op::Shift { x, axis, groups } => {
                self.acc(grads, *x, kernels::shift_channels(g, *axis, *groups, true))
            }
            Op::Reshape(x) => self.acc(grads, *x, g.clone().reshape(self.shape(*x))),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, permute(g, &inv));
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.ng(v) {
                        self.acc(grads, v, slice(g, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, n, inner) = axis_split(src_shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0f32; src_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, Tensor::new(src_shape, gx));
            }
            Op::GatherRows { x, idx, k } => {
                let src_shape = self.shape(*x);
                let (n, d) = (src_shape[1], src_shape[2]);
                let mut gx = vec![0.0f32; src_shape.iter().product()];
                for (row, &r) in idx.iter().enumerate() {
                    let bi = row / k;
                    let dst = (bi * n + r) * d;
                    for j in 0..d {
                        gx[dst + j] += g.data()[row * d + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(src_shape, gx));
            }
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (o, i) = (wt.dim(0), wt.dim(1));
                let rows = xt.len() / i;
                if self.ng(*x) {
                    let mut gx = vec![0.0f32; xt.len()];
                    kernels::gemm(rows, o, i, kernels::Mat::rows(g.data(), o), kernels::Mat::rows(wt.data(), i), 0.0, &mut gx);
                    self.acc(grads, *x, Tensor::new(xt.shape(), gx));
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0f32; o * i];
                    kernels::gemm(o, rows, i, kernels::Mat::t(g.data(), o), kernels::Mat::rows(xt.data(), i), 0.0, &mut gw);
                    self.acc(grads, *w, Tensor::new(wt.shape(), gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0f32; o];
                    for r in g.data().chunks(o) {
                        for (acc, v) in gb.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[o], gb));
                }
            }
            Op::SoftmaxLast(x) => {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0f32; y.len()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *y.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0f32; d];
                let mut gbeta = vec![0.0f32; d];
                let mut gx = vec![0.0f32; y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = rs / d as f32 * (d as f32 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), gx));
                self.acc(grads, *gamma, Tensor::new(&[d], gg));
                self.acc(grads, *beta, Tensor::new(&[d], gbeta));
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
                let (n, c, inner) = axis_split(y.shape(), 1);
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                let mut sum_dh = vec![0.0f32; c];
                let mut sum_dh_h = vec![0.0f32; c];
                for o in 0..n {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            gg[ch] += g.data()[i] * xhat[i];
                            gbeta[ch] += g.data()[i];
                            let dh = g.data()[i] * gam[ch];
                            sum_dh[ch] += dh;
                            sum_dh_h[ch] += dh * xhat[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let m = (n * inner) as f32;
                    let mut gx = vec![0.0f32; y.len()];
                    for o in 0..n {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                let dh = g.data()[i] * gam[ch];
                                gx[i] = if *batch_stats {
                                    rstd[ch] / m * (m * dh - sum_dh[ch] - xhat[i] * sum_dh_h[ch])
                                } else {
                                    dh * rstd[ch]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(y.shape(), gx));
                }
                self.acc(grads, *gamma, Tensor::new(&[c], gg));
                self.acc(grads, *beta, Tensor::new(&[c], gbeta));
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                let inner = y.len() / rstd.len();
                let m = inner as f32;
                let mut gx = vec![0.0f32; y.len()];
                for (p, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[p * inner..(p + 1) * inner];
                    let hr = &xhat[p * inner..(p + 1) * inner];
                    let sum_dh: f32 = gr.iter().sum();
                    let sum_dh_h: f32 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for i in 0..inner {
                        gx[p * inner + i] = rs / m * (m * gr[i] - sum_dh - hr[i] * sum_dh_h);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), gx));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let mut gx = vec![0.0f32; shape.iter().product()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g.data()[o * inner + i] / n as f32;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(shape, gx));
            }
            Op::MaxAxis { x, idx } => {
                let shape = self.shape(*x);
                let mut gx = vec![0.0f32; shape.iter().product()];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i as usize] += g.data()[o];
                }
                self.acc(grads, *x, Tensor::new(shape, gx));
            }
            Op::CrossEntropy { logits, probs, labels, weights } => {
                let c = self.shape(*logits)[1];
                let wsum: f32 = weights.iter().sum();
                let gv = g.item();
                let mut gx = vec![0.0f32; probs.len()];
                if wsum > 0.0 {
                    for (r, (&lab, &w)) in labels.iter().zip(weights).enumerate() {
                        for j in 0..c {
                            let t = if j == lab { 1.0 } else { 0.0 };
                            gx[r * c + j] = gv * w / wsum * (probs[r * c + j] - t);
                        }
                    }
                }
                self.acc(grads, *logits, Tensor::new(self.shape(*logits), gx));
            }
            Op::MsePerSample(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.dim(0);
                let per = ta.len() / n;
                let mut ga = vec![0.0f32; ta.len()];
                for s in 0..n {
                    let scale = 2.0 * g.data()[s] / per as f32;
                    for i in s * per..(s + 1) * per {
                        ga[i] = scale * (ta.data()[i] - tb.data()[i]);
                    }
                }
                if self.ng(*b) {
                    self.acc(grads, *b, Tensor::new(tb.shape(), ga.iter().map(|v| -v).collect()));
                }
                self.acc(grads, *a, Tensor::new(ta.shape(), ga));
            }
            Op::QuantizeSoft { logits, palette, tau, weights } => {
                let (lt, pt) = (self.value(*logits), self.value(*palette));
                let (n, k) = (lt.dim(0), lt.dim(1));
                let pixels = lt.dim(2) * lt.dim(3);
                let mut gl = if self.ng(*logits) { vec![0.0f32; lt.len()] } else { Vec::new() };
                let mut gp = if self.ng(*palette) { vec![0.0f32; pt.len()] } else { Vec::new() };
                for s in 0..n {
                    quant::soft_assign_backward(
                        &weights[s * k * pixels..(s + 1) * k * pixels],
                        &pt.data()[s * k * 3..(s + 1) * k * 3],
                        &g.data()[s * 3 * pixels..(s + 1) * 3 * pixels],
                        k,
                        pixels,
                        *tau,
                        (!gl.is_empty()).then(|| &mut gl[s * k * pixels..(s + 1) * k * pixels]),
                        (!gp.is_empty()).then(|| &mut gp[s * k * 3..(s + 1) * k * 3]),
                    );
                }
                if !gl.is_empty() {
                    self.acc(grads, *logits, Tensor::new(lt.shape(), gl));
                }
                if !gp.is_empty() {
                    self.acc(grads, *palette, Tensor::new(pt.shape(), gp));
                }
            }
            Op::PairwiseMul(x) => {
                let src = self.value(*x);
                let (b, n, d) = (src.dim(0), src.dim(1), src.dim(2));
                let mut gx = vec![0.0f32; src.len()];
                for bi in 0..b {
                    for i in 0..n {
                        for j in 0..n {
                            let o = ((bi * n + i) * n + j) * d;
                            let (xi, xj) = ((bi * n + i) * d, (bi * n + j) * d);
                            for k in 0..d {
                                let gv = g.data()[o + k];
                                gx[xi + k] += gv * src.data()[xj + k];
                                gx[xj + k] += gv * src.data()[xi + k];
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(src.shape(), gx));
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (at, bt) = (self.value(a), self.value(b));
        let (ba, bb) = (at.dim(0), bt.dim(0));
        let batch = g.dim(0);
        let (m, n) = (g.dim(1), g.dim(2));
        let k = if ta { at.dim(1) } else { at.dim(2) };
        let (sa, sb) = (at.dim(1) * at.dim(2), bt.dim(1) * bt.dim(2));
        let mut ga = if self.ng(a) { vec![0.0f32; at.len()] } else { Vec::new() };
        let mut gb = if self.ng(b) { vec![0.0f32; bt.len()] } else { Vec::new() };
        for i in 0..batch {
            let gs = &g.data()[i * m * n..(i + 1) * m * n];
            let a_s = &at.data()[(i % ba) * sa..(i % ba + 1) * sa];
            let b_s = &bt.data()[(i % bb) * sb..(i % bb + 1) * sb];
            if !ga.is_empty() {
                let dst = &mut ga[(i % ba) * sa..(i % ba + 1) * sa];
                if ta {
                    // stored [K,M] = op(B) · dCᵀ
                    kernels::gemm(k, n, m, op_view(b_s, k, n, tb), kernels::Mat::t(gs, n), 1.0, dst);
                } else {
                    // [M,K] = dC · op(B)ᵀ
                    kernels::gemm(m, n, k, kernels::Mat::rows(gs, n), transpose_view(op_view(b_s, k, n, tb)), 1.0, dst);
                }
            }
            if !gb.is_empty() {
                let dst = &mut gb[(i % bb) * sb..(i % bb + 1) * sb];
                if tb {
                    // stored [N,K] = dCᵀ · op(A)
                    kernels::gemm(n, m, k, kernels::Mat::t(gs, n), op_view(a_s, m, k, ta), 1.0, dst);
                } else {
                    // [K,N] = op(A)ᵀ · dC
                    kernels::gemm(k, m, n, transpose_view(op_view(a_s, m, k, ta)), kernels::Mat::rows(gs, n), 1.0, dst);
                }
            }
        }
        if !ga.is_empty() {
            self.acc(grads, a, Tensor::new(at.shape(), ga));
        }
        if !gb.is_empty() {
            self.acc(grads, b, Tensor::new(bt.shape(), gb));
        }
    }
}

/// View of `op(X)` with logical shape `rows × cols`, where `X` is stored
/// row-major as `[rows, cols]`, or `[cols, rows]` when `transposed`.
fn op_view(data: &[f32], rows: usize, cols: usize, transposed: bool) -> kernels::Mat<'_> {
    if transposed {
        kernels::Mat { data, rs: 1, cs: rows }
    } else {
        kernels::Mat { data, rs: cols, cs: 1 }
    }
}

fn transpose_view(m: kernels::Mat<'_>) -> kernels::Mat<'_> {
    kernels::Mat { data: m.data, rs: m.cs, cs: m.rs }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(x.shape(), g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect())
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

const GELU_C: f32 = 0.797_884_6;

fn gelu(v: f32) -> f32 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f32) -> f32 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

/// Calls `f(index_in_a, index_in_b)` for every element of `a_shape`, where
/// `b_shape` has the same rank and each axis equals `a`'s or is 1.
fn for_each_bcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    assert_eq!(a_shape.len(), b_shape.len(), "broadcast rank mismatch {a_shape:?} vs {b_shape:?}");
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        assert!(
            b_shape[d] == a_shape[d] || b_shape[d] == 1,
            "cannot broadcast {b_shape:?} to {a_shape:?}"
        );
        b_strides[d] = if b_shape[d] == 1 { 0 } else { s };
        s *= b_shape[d];
    }
    let total: usize = a_shape.iter().product();
    if rank == 0 {
        if total == 1 {
            f(0, 0);
        }
        return;
    }
    // innermost axis handled in a tight loop
    let last = a_shape[rank - 1];
    let last_stride = b_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut ia = 0;
    while ia < total {
        let base_b: usize = (0..rank - 1).map(|d| idx[d] * b_strides[d]).sum();
        for j in 0..last {
            f(ia + j, base_b + j * last_stride);
        }
        ia += last;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|t| t.dim(axis)).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in parts {
            let len = t.dim(axis) * inner;
            out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(&shape, out)
}

fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}
