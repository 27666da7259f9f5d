use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::graph::{Graph, Op, Var};

/// Pointwise nonlinearities. `Abs` exists for the L1 loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Gelu,
    Abs,
}

/// Spatial resampling over the `[..., H, W, C]` axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    MeanPool2,
    Bilinear { out_h: usize, out_w: usize },
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

fn spatial_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::dim(format!("{op}: expected [..., H, W, C], got {shape:?}")));
    }
    let n = shape.len();
    if shape[n - 3] == 0 || shape[n - 2] == 0 {
        return Err(Error::dim(format!("{op}: empty spatial extent {shape:?}")));
    }
    let batch = shape[..n - 3].iter().product();
    Ok((batch, shape[n - 3], shape[n - 2], shape[n - 1]))
}

/// Source taps for align-corners-false bilinear resampling with edge clamping.
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// `[..., P, Q] x [Q, R] -> [..., P, R]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.ndim() != 2 || va.ndim() < 1 || va.last_dim() != vb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (q, r) = (vb.shape()[0], vb.shape()[1]);
        let rows = va.len() / q.max(1);
        let mut out = vec![T::zero(); rows * r];
        let (ad, bd) = (va.data(), vb.data());
        for i in 0..rows {
            let orow = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let x = ad[i * q + k];
                if x == T::zero() {
                    continue;
                }
                let brow = &bd[k * r..(k + 1) * r];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = r;
        let cost = (rows * q * r) as u64;
        self.push(Tensor::new(&shape, out)?, Op::Matmul, &[a, b], cost)
    }

    /// Adds `bias[C]` to every row of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vb.len();
        if vb.ndim() != 1 || vx.last_dim() != c {
            return Err(Error::dim(format!(
                "add_bias: {:?} + {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let cost = out.len() as u64;
        self.push(out, Op::AddBias, &[x, bias], cost)
    }

    /// Pointwise activation.
    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let f: fn(T) -> T = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => |v: T| v.tanh(),
            Activation::Gelu => gelu,
            Activation::Abs => |v: T| v.abs(),
        };
        let out = self.value(x).map(f);
        let cost = out.len() as u64;
        self.push(out, Op::Unary(kind), &[x], cost)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(Error::dim(format!(
                "softmax: axis {axis} invalid for shape {:?}",
                vx.shape()
            )));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut out = vx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(d[base + k * inner]);
                }
                let mut s = T::zero();
                for k in 0..n {
                    let e = (d[base + k * inner] - m).exp();
                    d[base + k * inner] = e;
                    s += e;
                }
                for k in 0..n {
                    d[base + k * inner] /= s;
                }
            }
        }
        let cost = out.len() as u64;
        self.push(out, Op::Softmax { axis }, &[x], cost)
    }

    /// Same-padded 3x3 convolution of `x[..., H, W, Cin]` with `k[3, 3, Cin, Cout]`.
    pub fn conv3x3(&mut self, x: Var, k: Var, bias: Var) -> Result<Var> {
        let (vx, vk, vb) = (self.value(x), self.value(k), self.value(bias));
        let (batch, h, w, cin) = spatial_dims(vx.shape(), "conv2d_3x3")?;
        if vk.ndim() != 4 || vk.shape()[..3] != [3, 3, cin] {
            return Err(Error::dim(format!(
                "conv2d_3x3: kernel {:?} for input {:?}",
                vk.shape(),
                vx.shape()
            )));
        }
        let cout = vk.shape()[3];
        if vb.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv2d_3x3: bias {:?}, expected [{cout}]",
                vb.shape()
            )));
        }
        let dims = super::conv::Dims { batch, h, w, cin, cout };
        let out = super::conv::forward(vx.data(), vk.data(), vb.data(), &dims);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let cost = (batch * h * w * 9 * cin * cout) as u64;
        self.push(Tensor::new(&shape, out)?, Op::Conv3x3, &[x, k, bias], cost)
    }

    /// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.rms_norm_eps(x, gain, 1e-6)
    }

    pub fn rms_norm_eps(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let c = vx.last_dim();
        if vg.shape() != [c] || c == 0 {
            return Err(Error::dim(format!(
                "rms_norm: gain {:?} for input {:?}",
                vg.shape(),
                vx.shape()
            )));
        }
        let eps = T::c(eps);
        let mut out = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.len() / c);
        for row in out.data_mut().chunks_mut(c) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::c(c as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for (v, &g) in row.iter_mut().zip(vg.data()) {
                *v = *v * r * g;
            }
        }
        let cost = 2 * out.len() as u64;
        self.push(out, Op::RmsNorm { inv_rms }, &[x, gain], cost)
    }

    pub fn resample(&mut self, x: Var, mode: Resample) -> Result<Var> {
        let vx = self.value(x);
        let (batch, h, w, c) = spatial_dims(vx.shape(), "resample2")?;
        let xd = vx.data();
        let (oh, ow, out) = match mode {
            Resample::MeanPool2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::dim(format!(
                        "mean_pool_down2 needs even extents, got {h}x{w}"
                    )));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![T::zero(); batch * oh * ow * c];
                let q = T::c(0.25);
                for b in 0..batch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let o = ((b * oh + y) * ow + xx) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                                for ch in 0..c {
                                    out[o + ch] += xd[s + ch] * q;
                                }
                            }
                        }
                    }
                }
                (oh, ow, out)
            }
            Resample::Bilinear { out_h, out_w } => {
                if out_h == 0 || out_w == 0 {
                    return Err(Error::dim("bilinear: zero output extent"));
                }
                let ty = bilinear_taps(h, out_h);
                let tx = bilinear_taps(w, out_w);
                let mut out = vec![T::zero(); batch * out_h * out_w * c];
                for b in 0..batch {
                    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let o = ((b * out_h + y) * out_w + xx) * c;
                            let taps = [
                                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                (y0, x1, (1.0 - fy) * fx),
                                (y1, x0, fy * (1.0 - fx)),
                                (y1, x1, fy * fx),
                            ];
                            for (sy, sx, wt) in taps {
                                let wt = T::c(wt);
                                let s = ((b * h + sy) * w + sx) * c;
                                for ch in 0..c {
                                    out[o + ch] += xd[s + ch] * wt;
                                }
                            }
                        }
                    }
                }
                (out_h, out_w, out)
            }
        };
        let n = vx.ndim();
        let mut shape = vx.shape().to_vec();
        shape[n - 3] = oh;
        shape[n - 2] = ow;
        let cost = out.len() as u64 * 4;
        self.push(Tensor::new(&shape, out)?, Op::Resample(mode), &[x], cost)
    }

    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        self.resample(x, Resample::MeanPool2)
    }

    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        let n = s.len();
        if n >= 3 && s[n - 3] == out_h && s[n - 2] == out_w {
            return Ok(x);
        }
        self.resample(x, Resample::Bilinear { out_h, out_w })
    }
}

/// `(outer, n, inner)` extents around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn add_bias_backward<T: Real>(g: &Tensor<T>, c: usize) -> (Tensor<T>, Tensor<T>) {
    let mut gb = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a += v;
        }
    }
    (g.clone(), Tensor::new(&[c], gb).unwrap())
}

pub(super) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (q, r) = (b.shape()[0], b.shape()[1]);
    let rows = a.len() / q.max(1);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let ga = if need_a {
        let mut out = vec![T::zero(); a.len()];
        for i in 0..rows {
            let grow = &gd[i * r..(i + 1) * r];
            for k in 0..q {
                let brow = &bd[k * r..(k + 1) * r];
                out[i * q + k] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
        Some(Tensor::new(a.shape(), out)?)
    } else {
        None
    };
    let gb = if need_b {
        let mut out = vec![T::zero(); q * r];
        for i in 0..rows {
            let grow = &gd[i * r..(i + 1) * r];
            for k in 0..q {
                let x = ad[i * q + k];
                if x == T::zero() {
                    continue;
                }
                for (o, &gv) in out[k * r..(k + 1) * r].iter_mut().zip(grow) {
                    *o += x * gv;
                }
            }
        }
        Some(Tensor::new(b.shape(), out)?)
    } else {
        None
    };
    Ok((ga, gb))
}

pub(super) fn unary_backward<T: Real>(
    kind: Activation,
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xv, &yv), &gv)| {
            let d = match kind {
                Activation::Sigmoid => yv * (T::one() - yv),
                Activation::Tanh => T::one() - yv * yv,
                Activation::Gelu => gelu_grad(xv),
                Activation::Abs => {
                    if xv > T::zero() {
                        T::one()
                    } else if xv < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
            };
            d * gv
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub(super) fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for k in 0..n {
                dot += yd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..n {
                let j = base + k * inner;
                out[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out).unwrap()
}

#[allow(clippy::type_complexity)]
pub(super) fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = x.ndim();
    let s = x.shape();
    let batch: usize = s[..n - 3].iter().product();
    let (h, w, cin) = (s[n - 3], s[n - 2], s[n - 1]);
    let cout = k.shape()[3];
    let dims = super::conv::Dims { batch, h, w, cin, cout };
    let (gx, gk, gb) = super::conv::backward(x.data(), k.data(), g.data(), &dims, need_x, need_k);
    (
        gx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        gk.map(|d| Tensor::new(k.shape(), d).unwrap()),
        gb.map(|d| Tensor::new(&[cout], d).unwrap()),
    )
}

pub(super) fn rms_norm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    inv_rms: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = gain.len();
    let cf = T::c(c as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    for (row, ((xr, gr), &r)) in x
        .data()
        .chunks(c)
        .zip(g.data().chunks(c))
        .zip(inv_rms)
        .enumerate()
    {
        // y_i = g_i x_i r, dr/dx_j = -x_j r^3 / C
        let mut dot = T::zero();
        for i in 0..c {
            dot += gr[i] * gain.data()[i] * xr[i];
            gg[i] += gr[i] * xr[i] * r;
        }
        let k = dot * r * r * r / cf;
        for i in 0..c {
            gx[row * c + i] = gr[i] * gain.data()[i] * r - xr[i] * k;
        }
    }
    (
        Tensor::new(x.shape(), gx).unwrap(),
        Tensor::new(&[c], gg).unwrap(),
    )
}

pub(super) fn resample_backward<T: Real>(mode: Resample, in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let n = in_shape.len();
    let batch: usize = in_shape[..n - 3].iter().product();
    let (h, w, c) = (in_shape[n - 3], in_shape[n - 2], in_shape[n - 1]);
    let gd = g.data();
    let mut gx = vec![T::zero(); batch * h * w * c];
    match mode {
        Resample::MeanPool2 => {
            let (oh, ow) = (h / 2, w / 2);
            let q = T::c(0.25);
            for b in 0..batch {
                for y in 0..oh {
                    for xx in 0..ow {
                        let o = ((b * oh + y) * ow + xx) * c;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                            for ch in 0..c {
                                gx[s + ch] += gd[o + ch] * q;
                            }
                        }
                    }
                }
            }
        }
        Resample::Bilinear { out_h, out_w } => {
            let ty = bilinear_taps(h, out_h);
            let tx = bilinear_taps(w, out_w);
            for b in 0..batch {
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let o = ((b * out_h + y) * out_w + xx) * c;
                        let taps = [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x1, (1.0 - fy) * fx),
                            (y1, x0, fy * (1.0 - fx)),
                            (y1, x1, fy * fx),
                        ];
                        for (sy, sx, wt) in taps {
                            let wt = T::c(wt);
                            let s = ((b * h + sy) * w + sx) * c;
                            for ch in 0..c {
                                gx[s + ch] += gd[o + ch] * wt;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gx).unwrap()
}
