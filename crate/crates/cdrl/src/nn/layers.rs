//! Layers with explicit forward caches and hand-derived backward passes.
//!
//! Every `forward` returns the output plus a context; `backward` consumes the
//! context and the upstream gradient, accumulates parameter gradients into
//! the layer's [`Param`]s, and returns the input gradient. Gradients
//! accumulate across calls (tied weights rely on this), so callers zero them
//! once per optimization step.

use super::tensor::{Scalar, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A learnable buffer with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub w: Vec<T>,
    pub g: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(w: Vec<T>) -> Self {
        let n = w.len();
        Self {
            w,
            g: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }
    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.g.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Kaiming-style: N(0, sqrt(2 / fan_in)).
    HeNormal,
    /// N(0, std).
    Normal(f64),
    Zero,
}

fn sample_init<T: Scalar>(init: Init, fan_in: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    match init {
        Init::Zero => vec![T::zero(); n],
        Init::HeNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::from_f64_c(dist.sample(rng))).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::from_f64_c(dist.sample(rng))).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// How out-of-bounds taps are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Clamp to the nearest edge pixel; a constant input stays constant.
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    /// (out_c × in_c·k·k), row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug)]
pub struct ConvCtx<T> {
    cols: Array2<T>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_pad_mode(in_c, out_c, k, stride, pad, PadMode::Zero, init, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_pad_mode(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            pad_mode,
            weight: Param::new(sample_init(init, fan_in, out_c * fan_in, rng)),
            bias: Param::new(vec![T::zero(); out_c]),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn weight_view(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_c, self.in_c * self.k * self.k), &self.weight.w).unwrap()
    }

    /// Resolves a padded tap coordinate to an input index, or None for a
    /// zero-padded out-of-range read.
    #[inline]
    fn tap(&self, raw: isize, extent: usize) -> Option<usize> {
        if raw >= 0 && (raw as usize) < extent {
            Some(raw as usize)
        } else {
            match self.pad_mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(raw.clamp(0, extent as isize - 1) as usize),
            }
        }
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Array2<T> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let mut cols = Array2::<T>::zeros((self.in_c * k * k, oh * ow));
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = match self.tap((oy * s + ki) as isize - p as isize, x.h) {
                            Some(v) => v,
                            None => continue,
                        };
                        let src_base = (c * x.h + iy) * x.w;
                        for ox in 0..ow {
                            let ix = match self.tap((ox * s + kj) as isize - p as isize, x.w) {
                                Some(v) => v,
                                None => continue,
                            };
                            dst[oy * ow + ox] = x.data[src_base + ix];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, in_h: usize, in_w: usize, oh: usize, ow: usize) -> Tensor<T> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let mut dx = Tensor::zeros(self.in_c, in_h, in_w);
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = dcols.row(row);
                    for oy in 0..oh {
                        let iy = match self.tap((oy * s + ki) as isize - p as isize, in_h) {
                            Some(v) => v,
                            None => continue,
                        };
                        let dst_base = (c * in_h + iy) * in_w;
                        for ox in 0..ow {
                            let ix = match self.tap((ox * s + kj) as isize - p as isize, in_w) {
                                Some(v) => v,
                                None => continue,
                            };
                            dx.data[dst_base + ix] = dx.data[dst_base + ix] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCtx<T>) {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let cols = self.im2col(x, oh, ow);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        {
            let mut y_mat = y.as_mat_mut();
            general_mat_mul(T::one(), &self.weight_view(), &cols.view(), T::zero(), &mut y_mat);
        }
        for c in 0..self.out_c {
            let b = self.bias.w[c];
            for v in &mut y.data[c * oh * ow..(c + 1) * oh * ow] {
                *v = *v + b;
            }
        }
        (
            y,
            ConvCtx {
                cols,
                in_h: x.h,
                in_w: x.w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    pub fn backward(&mut self, ctx: &ConvCtx<T>, dy: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!((dy.c, dy.h, dy.w), (self.out_c, ctx.out_h, ctx.out_w));
        let fan = self.in_c * self.k * self.k;
        let dy_mat = dy.as_mat();
        {
            let mut dw =
                ArrayViewMut2::from_shape((self.out_c, fan), &mut self.weight.g).unwrap();
            general_mat_mul(T::one(), &dy_mat, &ctx.cols.t(), T::one(), &mut dw);
        }
        for c in 0..self.out_c {
            let mut s = T::zero();
            for &v in &dy.data[c * dy.h * dy.w..(c + 1) * dy.h * dy.w] {
                s = s + v;
            }
            self.bias.g[c] = self.bias.g[c] + s;
        }
        let mut dcols = Array2::<T>::zeros((fan, ctx.out_h * ctx.out_w));
        general_mat_mul(T::one(), &self.weight_view().t(), &dy_mat, T::zero(), &mut dcols);
        self.col2im(&dcols, ctx.in_h, ctx.in_w, ctx.out_h, ctx.out_w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Fully connected (attention bottlenecks)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_f: usize,
    pub out_f: usize,
    /// (out_f × in_f), row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LinearCtx<T> {
    x: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_f: usize, out_f: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_f,
            out_f,
            weight: Param::new(sample_init(init, in_f, out_f * in_f, rng)),
            bias: Param::new(vec![T::zero(); out_f]),
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LinearCtx<T>) {
        debug_assert_eq!(x.len(), self.in_f);
        let mut y = self.bias.w.clone();
        for o in 0..self.out_f {
            let row = &self.weight.w[o * self.in_f..(o + 1) * self.in_f];
            let mut acc = T::zero();
            for (wi, xi) in row.iter().zip(x) {
                acc = acc + *wi * *xi;
            }
            y[o] = y[o] + acc;
        }
        (y, LinearCtx { x: x.to_vec() })
    }

    pub fn backward(&mut self, ctx: &LinearCtx<T>, dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_f];
        for o in 0..self.out_f {
            let d = dy[o];
            self.bias.g[o] = self.bias.g[o] + d;
            let row_w = &self.weight.w[o * self.in_f..(o + 1) * self.in_f];
            let row_g = &mut self.weight.g[o * self.in_f..(o + 1) * self.in_f];
            for i in 0..self.in_f {
                row_g[i] = row_g[i] + d * ctx.x[i];
                dx[i] = dx[i] + d * row_w[i];
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

/// LeakyReLU with the given negative slope (slope 0 = plain ReLU).
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> (Tensor<T>, Vec<bool>) {
    let a = T::from_f64_c(slope);
    let mask: Vec<bool> = x.data.iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { a * v });
    (y, mask)
}

pub fn leaky_relu_backward<T: Scalar>(dy: &Tensor<T>, mask: &[bool], slope: f64) -> Tensor<T> {
    let a = T::from_f64_c(slope);
    let data = dy
        .data
        .iter()
        .zip(mask)
        .map(|(&d, &pos)| if pos { d } else { a * d })
        .collect();
    Tensor {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data,
    }
}

pub fn tanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Backward given the *output* of tanh.
pub fn tanh_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data
        .iter()
        .zip(&y.data)
        .map(|(&d, &yv)| d * (T::one() - yv * yv))
        .collect();
    Tensor {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data,
    }
}

pub fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Clamp to [lo, hi]; gradient passes inside the closed interval.
pub fn clamp_forward<T: Scalar>(x: &Tensor<T>, lo: f64, hi: f64) -> (Tensor<T>, Vec<bool>) {
    let (lo, hi) = (T::from_f64_c(lo), T::from_f64_c(hi));
    let mask: Vec<bool> = x.data.iter().map(|&v| v >= lo && v <= hi).collect();
    let y = x.map(|v| v.max(lo).min(hi));
    (y, mask)
}

pub fn clamp_backward<T: Scalar>(dy: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let data = dy
        .data
        .iter()
        .zip(mask)
        .map(|(&d, &inside)| if inside { d } else { T::zero() })
        .collect();
    Tensor {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data,
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for iy in 0..x.h {
            for ix in 0..x.w {
                let v = x.at(c, iy, ix);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = y.idx(c, iy * 2 + dy, ix * 2 + dx);
                        y.data[i] = v;
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, dy.h / 2, dy.w / 2);
    for c in 0..dy.c {
        for iy in 0..dx.h {
            for ix in 0..dx.w {
                let mut s = T::zero();
                for a in 0..2 {
                    for b in 0..2 {
                        s = s + dy.at(c, iy * 2 + a, ix * 2 + b);
                    }
                }
                let i = dx.idx(c, iy, ix);
                dx.data[i] = s;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Instance normalization (per-channel over space, affine)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InstanceNorm<T> {
    pub c: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

#[derive(Debug)]
pub struct InCtx<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: Param::new(vec![T::one(); c]),
            beta: Param::new(vec![T::zero(); c]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, InCtx<T>) {
        debug_assert_eq!(x.c, self.c);
        let n = x.h * x.w;
        let nf = T::from_f64_c(n as f64);
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let sl = &x.data[c * n..(c + 1) * n];
            let mut mean = T::zero();
            for &v in sl {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &v in sl {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let istd = T::one() / (var + T::from_f64_c(self.eps)).sqrt();
            inv_std.push(istd);
            let (g, b) = (self.gamma.w[c], self.beta.w[c]);
            for i in 0..n {
                let xh = (sl[i] - mean) * istd;
                xhat.data[c * n + i] = xh;
                y.data[c * n + i] = g * xh + b;
            }
        }
        (y, InCtx { xhat, inv_std })
    }

    pub fn backward(&mut self, ctx: &InCtx<T>, dy: &Tensor<T>) -> Tensor<T> {
        let n = dy.h * dy.w;
        let nf = T::from_f64_c(n as f64);
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let dys = &dy.data[c * n..(c + 1) * n];
            let xh = &ctx.xhat.data[c * n..(c + 1) * n];
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..n {
                sum_dy = sum_dy + dys[i];
                sum_dy_xh = sum_dy_xh + dys[i] * xh[i];
            }
            self.beta.g[c] = self.beta.g[c] + sum_dy;
            self.gamma.g[c] = self.gamma.g[c] + sum_dy_xh;
            let scale = self.gamma.w[c] * ctx.inv_std[c];
            let mean_dy = sum_dy / nf;
            let mean_dy_xh = sum_dy_xh / nf;
            for i in 0..n {
                dx.data[c * n + i] = scale * (dys[i] - mean_dy - xh[i] * mean_dy_xh);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// Elementwise losses
// ---------------------------------------------------------------------------

/// Mean absolute error, accumulated in f64.
pub fn mae_tensor<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    debug_assert!(a.same_shape(b));
    let mut s = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        s += (x.to_f64_c() - y.to_f64_c()).abs();
    }
    s / a.len() as f64
}

/// d/da of `scale · mae(a, b)`: sign(a − b) · scale / numel.
pub fn mae_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Tensor<T> {
    let k = T::from_f64_c(scale / a.len() as f64);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            if x > y {
                k
            } else if x < y {
                -k
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor {
        c: a.c,
        h: a.h,
        w: a.w,
        data,
    }
}

// ---------------------------------------------------------------------------
// Pooling descriptors for the attention gates
// ---------------------------------------------------------------------------

/// Mean over H·W per channel.
pub fn spatial_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let n = x.h * x.w;
    let nf = T::from_f64_c(n as f64);
    (0..x.c)
        .map(|c| {
            let mut s = T::zero();
            for &v in &x.data[c * n..(c + 1) * n] {
                s = s + v;
            }
            s / nf
        })
        .collect()
}

/// Max over H·W per channel, with the winning flat index for backward.
pub fn spatial_max_pool<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let n = x.h * x.w;
    let mut vals = Vec::with_capacity(x.c);
    let mut arg = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let sl = &x.data[c * n..(c + 1) * n];
        let mut best = sl[0];
        let mut bi = 0;
        for (i, &v) in sl.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = i;
            }
        }
        vals.push(best);
        arg.push(c * n + bi);
    }
    (vals, arg)
}

/// Mean over channels per pixel → 1×H×W.
pub fn channel_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.h * x.w;
    let cf = T::from_f64_c(x.c as f64);
    let mut out = Tensor::zeros(1, x.h, x.w);
    for c in 0..x.c {
        for i in 0..n {
            out.data[i] = out.data[i] + x.data[c * n + i];
        }
    }
    for v in &mut out.data {
        *v = *v / cf;
    }
    out
}

/// Max over channels per pixel → 1×H×W plus the winning channel per pixel.
pub fn channel_max_pool<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let n = x.h * x.w;
    let mut out = Tensor::zeros(1, x.h, x.w);
    let mut arg = vec![0usize; n];
    for i in 0..n {
        let mut best = x.data[i];
        let mut bc = 0;
        for c in 1..x.c {
            let v = x.data[c * n + i];
            if v > best {
                best = v;
                bc = c;
            }
        }
        out.data[i] = best;
        arg[i] = bc;
    }
    (out, arg)
}
