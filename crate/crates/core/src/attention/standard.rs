//! Multi-head cross-attention with per-head query, key and value projections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Projections of standard multi-head cross-attention. Each per-head matrix is `C x C/h`.
#[derive(Debug, Clone)]
pub struct StdAttnParams<T> {
    pub w_q: Vec<Tensor<T>>,
    pub w_k: Vec<Tensor<T>>,
    pub w_v: Vec<Tensor<T>>,
    /// `C x C`
    pub w_o: Tensor<T>,
    pub heads: usize,
    pub channels: usize,
}

impl<T: Real> StdAttnParams<T> {
    pub fn random<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::dim(format!("{channels} channels not divisible by {heads} heads")));
        }
        let dh = channels / heads;
        let a = (1.0 / channels as f64).sqrt();
        let mut mats = || -> Vec<Tensor<T>> {
            (0..heads)
                .map(|_| Tensor::rand_uniform(&[channels, dh], -a, a, rng))
                .collect()
        };
        let (w_q, w_k, w_v) = (mats(), mats(), mats());
        let w_o = Tensor::rand_uniform(&[channels, channels], -a, a, rng);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            channels,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// `x[1 x P] * m[P x R]` into `out[R]`.
pub(crate) fn vec_mat<T: Real>(x: &[T], m: &[T], r: usize, out: &mut [T]) {
    out.fill(T::zero());
    for (k, &xv) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&m[k * r..(k + 1) * r]) {
            *o += xv * w;
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

/// One query `q[C]` attending over `keys[N, C]`, returning `[C]`.
pub fn standard_cross_attention<T: Real>(q: &Tensor<T>, keys: &Tensor<T>, p: &StdAttnParams<T>) -> Result<Tensor<T>> {
    let c = p.channels;
    if q.shape() != [c] || keys.ndim() != 2 || keys.shape()[1] != c || keys.shape()[0] == 0 {
        return Err(Error::dim(format!(
            "standard_cross_attention: q {:?}, keys {:?}, C = {c}",
            q.shape(),
            keys.shape()
        )));
    }
    let n = keys.shape()[0];
    let dh = p.head_dim();
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut concat = vec![T::zero(); c];
    let mut qi = vec![T::zero(); dh];
    let mut kn = vec![T::zero(); dh];
    let mut vn = vec![T::zero(); dh];
    let mut scores = vec![T::zero(); n];
    let kd = keys.data();
    for i in 0..p.heads {
        vec_mat(q.data(), p.w_q[i].data(), dh, &mut qi);
        for (j, s) in scores.iter_mut().enumerate() {
            vec_mat(&kd[j * c..(j + 1) * c], p.w_k[i].data(), dh, &mut kn);
            *s = scale * qi.iter().zip(&kn).map(|(&a, &b)| a * b).sum::<T>();
        }
        softmax_in_place(&mut scores);
        let head = &mut concat[i * dh..(i + 1) * dh];
        for (j, &w) in scores.iter().enumerate() {
            vec_mat(&kd[j * c..(j + 1) * c], p.w_v[i].data(), dh, &mut vn);
            for (h, &v) in head.iter_mut().zip(&vn) {
                *h += w * v;
            }
        }
    }
    let mut out = vec![T::zero(); c];
    vec_mat(&concat, p.w_o.data(), c, &mut out);
    Tensor::new(&[c], out)
}
