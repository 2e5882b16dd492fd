//! Forward and backward kernels for the temporal primitives. All of them act on
//! the T axis only and treat `(H, W)` as an opaque contiguous block.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a 1-D temporal convolution with kernel `(k, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    /// Symmetric "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        ConvGeom {
            kernel,
            dilation,
            groups,
            pad_left: pad,
            pad_right: pad,
        }
    }

    pub fn out_len(&self, t: usize) -> Option<usize> {
        (t + self.pad_left + self.pad_right).checked_sub(self.dilation * (self.kernel - 1))
    }

    pub(crate) fn check(&self, x: Shape, w: Shape) -> Result<Shape> {
        if self.kernel == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::config(format!("degenerate convolution {self:?}")));
        }
        if !x.c.is_multiple_of(self.groups) || !w.n.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "channels in={} out={} not divisible by groups={}",
                x.c, w.n, self.groups
            )));
        }
        if w.c != x.c / self.groups || w.t != self.kernel || w.h != 1 || w.w != 1 {
            return Err(Error::config(format!(
                "kernel shape {w} does not fit input {x} with {self:?}"
            )));
        }
        match self.out_len(x.t) {
            Some(t) if t == x.t => Ok(Shape { c: w.n, ..x }),
            _ => Err(Error::config(format!(
                "padding {:?} does not preserve T={} for kernel {} dilation {}",
                (self.pad_left, self.pad_right),
                x.t,
                self.kernel,
                self.dilation
            ))),
        }
    }
}

/// Valid output range `[lo, hi)` for tap offset `off = j*d - pad_left`.
#[inline]
fn tap_range(off: isize, t_in: usize, t_out: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (t_in as isize - off).clamp(0, t_out as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn temporal_conv<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ys = g.check(xs, w.shape())?;
    let mut y = Tensor::zeros(ys);
    let hw = xs.spatial();
    let (cin_g, cout_g) = (xs.c / g.groups, ys.c / g.groups);
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for n in 0..xs.n {
        for co in 0..ys.c {
            let grp = co / cout_g;
            let ybase = (n * ys.c + co) * ys.t * hw;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let xbase = (n * xs.c + ci) * xs.t * hw;
                for j in 0..g.kernel {
                    let wv = wd[(co * cin_g + cl) * g.kernel + j];
                    let off = (j * g.dilation) as isize - g.pad_left as isize;
                    let (lo, hi) = tap_range(off, xs.t, ys.t);
                    for t in lo..hi {
                        let ts = (t as isize + off) as usize;
                        let yrow = &mut yd[ybase + t * hw..ybase + (t + 1) * hw];
                        let xrow = &xd[xbase + ts * hw..xbase + (ts + 1) * hw];
                        for (a, &b) in yrow.iter_mut().zip(xrow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dw)`; either may be skipped when not needed.
pub(crate) fn temporal_conv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let xs = x.shape();
    let ys = gy.shape();
    let hw = xs.spatial();
    let (cin_g, cout_g) = (xs.c / g.groups, ys.c / g.groups);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    for n in 0..xs.n {
        for co in 0..ys.c {
            let grp = co / cout_g;
            let ybase = (n * ys.c + co) * ys.t * hw;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let xbase = (n * xs.c + ci) * xs.t * hw;
                for j in 0..g.kernel {
                    let widx = (co * cin_g + cl) * g.kernel + j;
                    let off = (j * g.dilation) as isize - g.pad_left as isize;
                    let (lo, hi) = tap_range(off, xs.t, ys.t);
                    let mut acc = S::zero();
                    for t in lo..hi {
                        let ts = (t as isize + off) as usize;
                        let grow = &gd[ybase + t * hw..ybase + (t + 1) * hw];
                        if let Some(dx) = dx.as_mut() {
                            let wv = wd[widx];
                            let dxrow = &mut dx.data_mut()[xbase + ts * hw..xbase + (ts + 1) * hw];
                            for (a, &b) in dxrow.iter_mut().zip(grow) {
                                *a += wv * b;
                            }
                        }
                        if dw.is_some() {
                            let xrow = &xd[xbase + ts * hw..xbase + (ts + 1) * hw];
                            for (&a, &b) in xrow.iter().zip(grow) {
                                acc += a * b;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub(crate) fn pointwise<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c != xs.c || ws.t != 1 || ws.h != 1 || ws.w != 1 {
        return Err(Error::config(format!(
            "pointwise weight {ws} does not match input channels {}",
            xs.c
        )));
    }
    let ys = xs.with_c(ws.n);
    let p = xs.positions();
    let mut y = Tensor::zeros(ys);
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for n in 0..xs.n {
        for co in 0..ys.c {
            let yrow = &mut yd[(n * ys.c + co) * p..(n * ys.c + co + 1) * p];
            for ci in 0..xs.c {
                let wv = wd[co * xs.c + ci];
                if wv == S::zero() {
                    continue;
                }
                let xrow = &xd[(n * xs.c + ci) * p..(n * xs.c + ci + 1) * p];
                for (a, &b) in yrow.iter_mut().zip(xrow) {
                    *a += wv * b;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) fn pointwise_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let xs = x.shape();
    let cout = gy.shape().c;
    let p = xs.positions();
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    for n in 0..xs.n {
        for co in 0..cout {
            let grow = &gd[(n * cout + co) * p..(n * cout + co + 1) * p];
            for ci in 0..xs.c {
                let xrange = (n * xs.c + ci) * p..(n * xs.c + ci + 1) * p;
                if let Some(dw) = dw.as_mut() {
                    let acc: S = xd[xrange.clone()].iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    dw.data_mut()[co * xs.c + ci] += acc;
                }
                if let Some(dx) = dx.as_mut() {
                    let wv = wd[co * xs.c + ci];
                    for (a, &b) in dx.data_mut()[xrange].iter_mut().zip(grow) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Output length and left pad for a temporal pooling window. Stride 1 pads on
/// the left by `kernel - 1` so T is preserved; stride 2 uses no padding.
pub(crate) fn pool_geometry(t: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if t == 0 {
        return Err(Error::config("temporal pooling over T = 0"));
    }
    if kernel == 0 {
        return Err(Error::config("temporal pooling with kernel 0"));
    }
    match stride {
        1 => Ok((t, kernel - 1)),
        2 => {
            if t < kernel {
                return Err(Error::config(format!(
                    "stride-2 pooling needs T >= {kernel}, got T = {t}"
                )));
            }
            Ok(((t - kernel) / 2 + 1, 0))
        }
        s => Err(Error::config(format!("pooling stride must be 1 or 2, got {s}"))),
    }
}

/// Max pooling; also returns the flat input index each output was taken from.
pub(crate) fn max_pool<S: Scalar>(x: &Tensor<S>, kernel: usize, stride: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let xs = x.shape();
    let (t_out, pad) = pool_geometry(xs.t, kernel, stride)?;
    let ys = xs.with_t(t_out);
    let hw = xs.spatial();
    let mut y = Tensor::zeros(ys);
    let mut arg = vec![0usize; ys.len()];
    let xd = x.data();
    for nc in 0..xs.n * xs.c {
        for t in 0..t_out {
            for s in 0..hw {
                let mut best = S::neg_infinity();
                let mut best_i = usize::MAX;
                for i in 0..kernel {
                    let ts = (t * stride + i) as isize - pad as isize;
                    if ts < 0 || ts as usize >= xs.t {
                        continue;
                    }
                    let idx = (nc * xs.t + ts as usize) * hw + s;
                    if best_i == usize::MAX || xd[idx] > best {
                        best = xd[idx];
                        best_i = idx;
                    }
                }
                let o = (nc * t_out + t) * hw + s;
                y.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((y, arg))
}

/// Average pooling; padded positions count as zeros in the divisor.
pub(crate) fn avg_pool<S: Scalar>(x: &Tensor<S>, kernel: usize, stride: usize) -> Result<Tensor<S>> {
    let xs = x.shape();
    let (t_out, pad) = pool_geometry(xs.t, kernel, stride)?;
    let ys = xs.with_t(t_out);
    let hw = xs.spatial();
    let inv = S::one() / S::of_usize(kernel);
    let mut y = Tensor::zeros(ys);
    let xd = x.data();
    for nc in 0..xs.n * xs.c {
        for t in 0..t_out {
            for i in 0..kernel {
                let ts = (t * stride + i) as isize - pad as isize;
                if ts < 0 || ts as usize >= xs.t {
                    continue;
                }
                let src = (nc * xs.t + ts as usize) * hw;
                let dst = (nc * t_out + t) * hw;
                for s in 0..hw {
                    y.data_mut()[dst + s] += xd[src + s] * inv;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) fn avg_pool_backward<S: Scalar>(xs: Shape, gy: &Tensor<S>, kernel: usize, stride: usize, pad: usize) -> Tensor<S> {
    let t_out = gy.shape().t;
    let hw = xs.spatial();
    let inv = S::one() / S::of_usize(kernel);
    let mut dx = Tensor::zeros(xs);
    let gd = gy.data();
    for nc in 0..xs.n * xs.c {
        for t in 0..t_out {
            for i in 0..kernel {
                let ts = (t * stride + i) as isize - pad as isize;
                if ts < 0 || ts as usize >= xs.t {
                    continue;
                }
                let dst = (nc * xs.t + ts as usize) * hw;
                let src = (nc * t_out + t) * hw;
                for s in 0..hw {
                    dx.data_mut()[dst + s] += gd[src + s] * inv;
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(N, T, H, W)`.
pub(crate) fn channel_moments<S: Scalar>(x: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let xs = x.shape();
    let p = xs.positions();
    let m = S::of_usize(xs.n * p);
    let mut mean = vec![S::zero(); xs.c];
    let mut var = vec![S::zero(); xs.c];
    let xd = x.data();
    for c in 0..xs.c {
        let mut s = S::zero();
        for n in 0..xs.n {
            s += xd[(n * xs.c + c) * p..(n * xs.c + c + 1) * p].iter().copied().sum::<S>();
        }
        let mu = s / m;
        let mut v = S::zero();
        for n in 0..xs.n {
            for &a in &xd[(n * xs.c + c) * p..(n * xs.c + c + 1) * p] {
                v += (a - mu) * (a - mu);
            }
        }
        mean[c] = mu;
        var[c] = v / m;
    }
    (mean, var)
}

/// `x_hat = (x - mean) * inv_std` per channel.
pub(crate) fn normalize<S: Scalar>(x: &Tensor<S>, mean: &[S], inv_std: &[S]) -> Tensor<S> {
    let xs = x.shape();
    let p = xs.positions();
    let mut out = x.clone();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for v in &mut out.data_mut()[(n * xs.c + c) * p..(n * xs.c + c + 1) * p] {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
    }
    out
}

/// Applies `f(channel, value)` to every element.
pub(crate) fn per_channel<S: Scalar>(x: &mut Tensor<S>, f: impl Fn(usize, S) -> S) {
    let xs = x.shape();
    let p = xs.positions();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for v in &mut x.data_mut()[(n * xs.c + c) * p..(n * xs.c + c + 1) * p] {
                *v = f(c, *v);
            }
        }
    }
}

/// Per-channel sums of `a` and of `a * b`.
pub(crate) fn channel_sums<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let xs = a.shape();
    let p = xs.positions();
    let mut sa = vec![S::zero(); xs.c];
    let mut sab = vec![S::zero(); xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let r = (n * xs.c + c) * p..(n * xs.c + c + 1) * p;
            for (&u, &v) in a.data()[r.clone()].iter().zip(&b.data()[r]) {
                sa[c] += u;
                sab[c] += u * v;
            }
        }
    }
    (sa, sab)
}
