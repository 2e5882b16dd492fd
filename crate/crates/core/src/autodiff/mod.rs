//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! inputs are strictly earlier nodes, so index order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. The graph is rebuilt for
//! every forward pass; parameter values are copied in on first use.

mod kernels;

use std::collections::HashMap;

use rand::Rng;

pub use kernels::{ConvGeom, PoolKind};

use crate::error::{Error, Result};
use crate::param::{ParamKey, Parameter};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> RunningStats<S> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }
}

enum Op<S> {
    Input,
    Constant,
    Param,
    Relu(Var),
    Sigmoid(Var),
    TemporalConv { x: Var, w: Var, geom: ConvGeom },
    Pointwise { x: Var, w: Var },
    ChannelBias { x: Var, b: Var },
    BatchNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
        training: bool,
    },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, kernel: usize, stride: usize, pad: usize },
    Softmax(Var),
    Mix { weights: Var, terms: Vec<(usize, Var)> },
    AddN(Vec<Var>),
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    GlobalAvgPool(Var),
    Dropout { x: Var, mask: Vec<S> },
    BceWithLogits { logits: Var, targets: Tensor<S> },
    SoftmaxXent { logits: Var, targets: Tensor<S>, probs: Tensor<S> },
    Sum(Var),
    Dot { x: Var, r: Tensor<S> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::Pointwise { .. } => "pointwise_conv",
            Op::ChannelBias { .. } => "channel_bias",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Softmax(_) => "softmax",
            Op::Mix { .. } => "mix",
            Op::AddN(_) => "add",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute_channels",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Dot { .. } => "dot",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Constant | Op::Param => vec![],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x) => vec![*x],
            Op::TemporalConv { x, w, .. } | Op::Pointwise { x, w } => vec![*x, *w],
            Op::ChannelBias { x, b } => vec![*x, *b],
            Op::BatchNorm { x, affine, .. } => {
                let mut v = vec![*x];
                if let Some((g, b)) = affine {
                    v.extend([*g, *b]);
                }
                v
            }
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Permute { x, .. }
            | Op::Dropout { x, .. }
            | Op::Dot { x, .. } => vec![*x],
            Op::Mix { weights, terms } => {
                let mut v = vec![*weights];
                v.extend(terms.iter().map(|t| t.1));
                v
            }
            Op::AddN(xs) | Op::Concat(xs) => xs.clone(),
            Op::BceWithLogits { logits, .. } | Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamKey, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value (shape {})",
                op.name(),
                value.shape()
            )));
        }
        let requires_grad = match op {
            Op::Input | Op::Param => true,
            Op::Constant => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is tracked (used for gradient checks on inputs).
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Input)
    }

    /// A leaf that never receives a gradient (data, masks, fixed tensors).
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Leaf for a parameter; repeated calls with the same parameter return the
    /// same node so its gradient is accumulated over every use.
    pub fn param(&mut self, p: &Parameter<S>) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.key()) {
            return Ok(v);
        }
        let v = self.push(p.value.clone(), Op::Param)?;
        self.params.insert(p.key(), v);
        Ok(v)
    }

    pub fn zeros_like(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        self.constant(Tensor::zeros(shape))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(S::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    /// 1-D convolution along T with kernel weights of shape
    /// `(C_out, C_in / groups, k, 1, 1)`; the padding must preserve T.
    pub fn temporal_conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let y = kernels::temporal_conv(self.value(x), self.value(w), geom)?;
        self.push(y, Op::TemporalConv { x, w, geom })
    }

    /// Per-position linear map across channels with weights `(C_out, C_in, 1, 1, 1)`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = kernels::pointwise(self.value(x), self.value(w))?;
        self.push(y, Op::Pointwise { x, w })
    }

    /// Adds a per-channel bias held in a `(1, C, 1, 1, 1)` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let bias = self.value(b).data().to_vec();
        if bias.len() != self.shape(x).c {
            return Err(Error::config(format!(
                "bias of length {} for {} channels",
                bias.len(),
                self.shape(x).c
            )));
        }
        let mut y = self.value(x).clone();
        kernels::per_channel(&mut y, |c, v| v + bias[c]);
        self.push(y, Op::ChannelBias { x, b })
    }

    /// `x W^T + b` for `x` of shape `(N, C_in, 1, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.pointwise_conv(x, w)?;
        self.channel_bias(y, b)
    }

    /// Batch normalization over `(N, T, H, W)` per channel. In training mode
    /// batch statistics are used and `stats` is updated; otherwise `stats` is
    /// read. `affine` holds `(gamma, beta)` vars of shape `(1, C, 1, 1, 1)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        affine: Option<(Var, Var)>,
        stats: &mut RunningStats<S>,
        training: bool,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if stats.mean.len() != xs.c {
            return Err(Error::config(format!(
                "batch norm for {} channels applied to {xs}",
                stats.mean.len()
            )));
        }
        let eps = S::of(stats.eps);
        let (mean, var) = if training {
            let m = xs.n * xs.positions();
            if m < 2 {
                return Err(Error::config(format!(
                    "training-mode batch norm needs at least 2 values per channel, input {xs}"
                )));
            }
            let (mean, var) = kernels::channel_moments(self.value(x));
            let mom = S::of(stats.momentum);
            let unbias = S::of_usize(m) / S::of_usize(m - 1);
            for c in 0..xs.c {
                stats.mean[c] = (S::one() - mom) * stats.mean[c] + mom * mean[c];
                stats.var[c] = (S::one() - mom) * stats.var[c] + mom * var[c] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xhat = kernels::normalize(self.value(x), &mean, &inv_std);
        let mut y = xhat.clone();
        if let Some((g, b)) = affine {
            let (gamma, beta) = (self.value(g).data().to_vec(), self.value(b).data().to_vec());
            if gamma.len() != xs.c || beta.len() != xs.c {
                return Err(Error::config("batch norm affine parameters do not match channels"));
            }
            kernels::per_channel(&mut y, |c, v| gamma[c] * v + beta[c]);
        }
        self.push(
            y,
            Op::BatchNorm {
                x,
                affine,
                xhat,
                inv_std,
                training,
            },
        )
    }

    /// Sliding-window pooling over T. Stride 1 pads left by `kernel - 1`
    /// (max pads with -inf, avg with zeros counted in the divisor) so T is
    /// kept; stride 2 uses no padding and yields `floor((T - k) / 2) + 1`.
    pub fn pool_t(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var> {
        match kind {
            PoolKind::Max => {
                let (y, argmax) = kernels::max_pool(self.value(x), kernel, stride)?;
                self.push(y, Op::MaxPool { x, argmax })
            }
            PoolKind::Avg => {
                let (_, pad) = kernels::pool_geometry(self.shape(x).t, kernel, stride)?;
                let y = kernels::avg_pool(self.value(x), kernel, stride)?;
                self.push(
                    y,
                    Op::AvgPool {
                        x,
                        kernel,
                        stride,
                        pad,
                    },
                )
            }
        }
    }

    /// Softmax along C, independently at every `(n, t, h, w)`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let p = s.positions();
        let mut y = xv.clone();
        for n in 0..s.n {
            for q in 0..p {
                let idx = |c: usize| (n * s.c + c) * p + q;
                let max = (0..s.c).map(|c| xv.data()[idx(c)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for c in 0..s.c {
                    let e = (xv.data()[idx(c)] - max).exp();
                    y.data_mut()[idx(c)] = e;
                    z += e;
                }
                for c in 0..s.c {
                    y.data_mut()[idx(c)] /= z;
                }
            }
        }
        self.push(y, Op::Softmax(x))
    }

    /// `sum_i weights[idx_i] * term_i` where `weights` is a `(1, K, 1, 1, 1)`
    /// vector; the terms must share one shape.
    pub fn mix(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::config("mix over an empty set of terms"));
        };
        let shape = self.shape(first);
        let wv = self.value(weights).data().to_vec();
        let mut y = Tensor::zeros(shape);
        for &(i, t) in terms {
            if i >= wv.len() {
                return Err(Error::config(format!("mix weight index {i} out of {}", wv.len())));
            }
            if self.shape(t) != shape {
                return Err(Error::config(format!(
                    "mix term shapes differ: {} vs {shape}",
                    self.shape(t)
                )));
            }
            let w = wv[i];
            for (a, &b) in y.data_mut().iter_mut().zip(self.value(t).data()) {
                *a += w * b;
            }
        }
        self.push(
            y,
            Op::Mix {
                weights,
                terms: terms.to_vec(),
            },
        )
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::config("sum over an empty list"));
        };
        let mut y = self.value(first).clone();
        for &x in &xs[1..] {
            if self.shape(x) != y.shape() {
                return Err(Error::config(format!(
                    "cannot add {} and {}",
                    self.shape(x),
                    y.shape()
                )));
            }
            y.add_assign(self.value(x));
        }
        self.push(y, Op::AddN(xs.to_vec()))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::config("concat of an empty list"));
        };
        let base = self.shape(first);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.with_c(base.c) != base {
                return Err(Error::config(format!("concat shape mismatch: {s} vs {base}")));
            }
            c_total += s.c;
        }
        let out = base.with_c(c_total);
        let p = base.positions();
        let mut y = Vec::with_capacity(out.len());
        for n in 0..base.n {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape().c;
                y.extend_from_slice(&v.data()[n * c * p..(n + 1) * c * p]);
            }
        }
        self.push(Tensor::from_vec(out, y)?, Op::Concat(xs.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        self.push(y, Op::Reshape(x))
    }

    /// Output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.c];
        if perm.len() != s.c || perm.iter().any(|&i| i >= s.c || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::config("channel permutation is not a bijection"));
        }
        let p = s.positions();
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(s.len());
        for n in 0..s.n {
            for &src in perm {
                y.extend_from_slice(&xv[(n * s.c + src) * p..(n * s.c + src + 1) * p]);
            }
        }
        self.push(
            Tensor::from_vec(s, y)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Mean over `(T, H, W)`: `(N, C, T, H, W) -> (N, C, 1, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let p = s.positions();
        if p == 0 {
            return Err(Error::config("global pooling over an empty extent"));
        }
        let inv = S::one() / S::of_usize(p);
        let xv = self.value(x).data();
        let y: Vec<S> = xv.chunks(p).map(|ch| ch.iter().copied().sum::<S>() * inv).collect();
        self.push(Tensor::from_vec(Shape::new(s.n, s.c, 1, 1, 1), y)?, Op::GlobalAvgPool(x))
    }

    /// Inverted dropout: kept values are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let mut y = self.value(x).clone();
        for (a, &m) in y.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        self.push(y, Op::Dropout { x, mask })
    }

    /// Mean binary cross-entropy over all logits, computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::config(format!(
                "targets {} do not match logits {}",
                targets.shape(),
                z.shape()
            )));
        }
        let total: S = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / S::of_usize(z.len());
        self.push(
            Tensor::vector(&[loss]),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
        )
    }

    /// Mean over samples of `-sum_k t_k log softmax(z)_k`; logits `(N, K, 1, 1, 1)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        let z = self.value(logits);
        let s = z.shape();
        if s != targets.shape() || s.positions() != 1 {
            return Err(Error::config(format!(
                "targets {} do not match logits {s}",
                targets.shape()
            )));
        }
        let mut probs = z.clone();
        let mut total = S::zero();
        for n in 0..s.n {
            let row = &z.data()[n * s.c..(n + 1) * s.c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for k in 0..s.c {
                let lp = row[k] - lse;
                probs.data_mut()[n * s.c + k] = lp.exp();
                total -= targets.data()[n * s.c + k] * lp;
            }
        }
        let loss = total / S::of_usize(s.n.max(1));
        self.push(
            Tensor::vector(&[loss]),
            Op::SoftmaxXent {
                logits,
                targets: targets.clone(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::vector(&[s]), Op::Sum(x))
    }

    /// `sum(x * r)` for a fixed tensor `r`; a random projection for gradient checks.
    pub fn dot(&mut self, x: Var, r: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return Err(Error::config("dot operands differ in shape"));
        }
        let s = self.value(x).dot(r);
        self.push(Tensor::vector(&[s]), Op::Dot { x, r: r.clone() })
    }

    /// Reverse sweep from a scalar root. Gradients are kept for leaves
    /// (inputs and parameters); parameters the root does not depend on get
    /// no entry and therefore a zero contribution.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let Some(node) = self.nodes.get(root.0) else {
            return Err(Error::Usage(format!(
                "backward from node {} but the graph only has {} nodes; run the forward pass first",
                root.0,
                self.nodes.len()
            )));
        };
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(node.value.shape(), S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            for v in node.op.inputs() {
                if v.0 >= i {
                    return Err(Error::Internal(format!(
                        "node {i} ({}) references node {} which is not earlier: cycle",
                        node.op.name(),
                        v.0
                    )));
                }
            }
            self.backward_node(i, &gy, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Constant | Op::Param => {}
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = gy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= S::zero() {
                        *d = S::zero();
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = gy.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (S::one() - s);
                }
                accumulate(grads, *x, dx);
            }
            Op::TemporalConv { x, w, geom } => {
                let (dx, dw) = kernels::temporal_conv_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::Pointwise { x, w } => {
                let (dx, dw) = kernels::pointwise_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::ChannelBias { x, b } => {
                if self.needs(*b) {
                    let ones = Tensor::full(gy.shape(), S::one());
                    let (sums, _) = kernels::channel_sums(gy, &ones);
                    accumulate(grads, *b, Tensor::vector(&sums));
                }
                accumulate(grads, *x, gy.clone());
            }
            Op::BatchNorm {
                x,
                affine,
                xhat,
                inv_std,
                training,
            } => {
                let xs = xhat.shape();
                let mut dxhat = gy.clone();
                if let Some((g, b)) = affine {
                    let (sum_g, sum_gx) = kernels::channel_sums(gy, xhat);
                    accumulate(grads, *b, Tensor::vector(&sum_g));
                    accumulate(grads, *g, Tensor::vector(&sum_gx));
                    let gamma = self.value(*g).data();
                    kernels::per_channel(&mut dxhat, |c, v| v * gamma[c]);
                }
                if !self.needs(*x) {
                    return;
                }
                if *training {
                    let m = S::of_usize(xs.n * xs.positions());
                    let (sum_d, sum_dx) = kernels::channel_sums(&dxhat, xhat);
                    let mut dx = dxhat;
                    let p = xs.positions();
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            let r = (n * xs.c + c) * p..(n * xs.c + c + 1) * p;
                            let xh = &xhat.data()[r.clone()];
                            for (d, &h) in dx.data_mut()[r].iter_mut().zip(xh) {
                                *d = inv_std[c] / m * (m * *d - sum_d[c] - h * sum_dx[c]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                } else {
                    let mut dx = dxhat;
                    kernels::per_channel(&mut dx, |c, v| v * inv_std[c]);
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&g, &src) in gy.data().iter().zip(argmax) {
                    dx.data_mut()[src] += g;
                }
                accumulate(grads, *x, dx);
            }
            Op::AvgPool {
                x,
                kernel,
                stride,
                pad,
            } => {
                let dx = kernels::avg_pool_backward(self.shape(*x), gy, *kernel, *stride, *pad);
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let s = y.shape();
                let p = s.positions();
                let mut dx = gy.clone();
                for n in 0..s.n {
                    for q in 0..p {
                        let idx = |c: usize| (n * s.c + c) * p + q;
                        let dot: S = (0..s.c).map(|c| gy.data()[idx(c)] * y.data()[idx(c)]).sum();
                        for c in 0..s.c {
                            dx.data_mut()[idx(c)] = y.data()[idx(c)] * (gy.data()[idx(c)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mix { weights, terms } => {
                let wv = self.value(*weights).data();
                if self.needs(*weights) {
                    let mut dw = Tensor::zeros(self.shape(*weights));
                    for &(k, t) in terms {
                        dw.data_mut()[k] += gy.dot(self.value(t));
                    }
                    accumulate(grads, *weights, dw);
                }
                for &(k, t) in terms {
                    if self.needs(t) {
                        let mut dt = gy.clone();
                        dt.scale(wv[k]);
                        accumulate(grads, t, dt);
                    }
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    if self.needs(x) {
                        accumulate(grads, x, gy.clone());
                    }
                }
            }
            Op::Concat(xs) => {
                let s = y.shape();
                let p = s.positions();
                let mut c0 = 0;
                for &x in xs {
                    let c = self.shape(x).c;
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(s.n * c * p);
                        for n in 0..s.n {
                            d.extend_from_slice(&gy.data()[(n * s.c + c0) * p..(n * s.c + c0 + c) * p]);
                        }
                        accumulate(grads, x, Tensor::from_vec(self.shape(x), d).expect("concat slice"));
                    }
                    c0 += c;
                }
            }
            Op::Reshape(x) => {
                let dx = gy.clone().reshaped(self.shape(*x)).expect("reshape preserves length");
                accumulate(grads, *x, dx);
            }
            Op::Permute { x, perm } => {
                let s = y.shape();
                let p = s.positions();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for (i, &src) in perm.iter().enumerate() {
                        dx.data_mut()[(n * s.c + src) * p..(n * s.c + src + 1) * p]
                            .copy_from_slice(&gy.data()[(n * s.c + i) * p..(n * s.c + i + 1) * p]);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let p = s.positions();
                let inv = S::one() / S::of_usize(p);
                let mut dx = Tensor::zeros(s);
                for (chunk, &g) in dx.data_mut().chunks_mut(p).zip(gy.data()) {
                    chunk.iter_mut().for_each(|v| *v = g * inv);
                }
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = gy.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                accumulate(grads, *x, dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = gy.data()[0] / S::of_usize(z.len());
                let mut dz = z.clone();
                for (d, &t) in dz.data_mut().iter_mut().zip(targets.data()) {
                    *d = (sigmoid(*d) - t) * scale;
                }
                accumulate(grads, *logits, dz);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let s = probs.shape();
                let scale = gy.data()[0] / S::of_usize(s.n.max(1));
                let mut dz = probs.clone();
                for n in 0..s.n {
                    let tsum: S = targets.data()[n * s.c..(n + 1) * s.c].iter().copied().sum();
                    for k in 0..s.c {
                        let i = n * s.c + k;
                        dz.data_mut()[i] = (probs.data()[i] * tsum - targets.data()[i]) * scale;
                    }
                }
                accumulate(grads, *logits, dz);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), gy.data()[0]));
            }
            Op::Dot { x, r } => {
                let mut dx = r.clone();
                dx.scale(gy.data()[0]);
                accumulate(grads, *x, dx);
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward sweep, addressable by leaf var or parameter key.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamKey, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf created by [`Graph::input`] or
    /// [`Graph::param`]; `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<S>> {
        self.params.get(&key).and_then(|&v| self.wrt(v))
    }
}

#[cfg(test)]
mod tests;
