//! Batched score and mix ops used by the attention graph code.

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// `scale * q[t] k[t]^T`: `[T, h, C] x [T, N, C] -> [T, h, N]`.
    pub fn attention_scores(&mut self, q: Var, k: Var, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.ndim() != 3 || kv.ndim() != 3 || qv.shape()[0] != kv.shape()[0] || qv.shape()[2] != kv.shape()[2] {
            return Err(Error::dim(format!(
                "attention_scores: {:?} vs {:?}",
                qv.shape(),
                kv.shape()
            )));
        }
        let (t, h, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let n = kv.shape()[1];
        let s = T::c(scale);
        let (qd, kd) = (qv.data(), kv.data());
        let mut out = vec![T::zero(); t * h * n];
        for b in 0..t {
            for i in 0..h {
                let qr = &qd[(b * h + i) * c..(b * h + i + 1) * c];
                for j in 0..n {
                    let kr = &kd[(b * n + j) * c..(b * n + j + 1) * c];
                    out[(b * h + i) * n + j] = s * qr.iter().zip(kr).map(|(&x, &y)| x * y).sum::<T>();
                }
            }
        }
        let cost = (t * h * n * c) as u64;
        self.push(Tensor::new(&[t, h, n], out)?, Op::AttnScores { scale: s }, &[q, k], cost)
    }

    /// `w[t] v[t]`: `[T, h, N] x [T, N, C] -> [T, h, C]`.
    pub fn attention_mix(&mut self, w: Var, v: Var) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        if wv.ndim() != 3 || vv.ndim() != 3 || wv.shape()[0] != vv.shape()[0] || wv.shape()[2] != vv.shape()[1] {
            return Err(Error::dim(format!(
                "attention_mix: {:?} vs {:?}",
                wv.shape(),
                vv.shape()
            )));
        }
        let (t, h, n) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let c = vv.shape()[2];
        let (wd, vd) = (wv.data(), vv.data());
        let mut out = vec![T::zero(); t * h * c];
        for b in 0..t {
            for i in 0..h {
                let o = &mut out[(b * h + i) * c..(b * h + i + 1) * c];
                for j in 0..n {
                    let a = wd[(b * h + i) * n + j];
                    for (x, &y) in o.iter_mut().zip(&vd[(b * n + j) * c..(b * n + j + 1) * c]) {
                        *x += a * y;
                    }
                }
            }
        }
        let cost = (t * h * n * c) as u64;
        self.push(Tensor::new(&[t, h, c], out)?, Op::AttnMix, &[w, v], cost)
    }
}

pub(crate) fn scores_backward<T: Real>(q: &Tensor<T>, k: &Tensor<T>, scale: T, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (t, h, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n = k.shape()[1];
    let (qd, kd, gd) = (q.data(), k.data(), g.data());
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    for b in 0..t {
        for i in 0..h {
            let qi = (b * h + i) * c;
            for j in 0..n {
                let gs = gd[(b * h + i) * n + j] * scale;
                let kj = (b * n + j) * c;
                for ch in 0..c {
                    gq[qi + ch] += gs * kd[kj + ch];
                    gk[kj + ch] += gs * qd[qi + ch];
                }
            }
        }
    }
    (
        Tensor::new(q.shape(), gq).unwrap(),
        Tensor::new(k.shape(), gk).unwrap(),
    )
}

pub(crate) fn mix_backward<T: Real>(w: &Tensor<T>, v: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (t, h, n) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let c = v.shape()[2];
    let (wd, vd, gd) = (w.data(), v.data(), g.data());
    let mut gw = vec![T::zero(); w.len()];
    let mut gv = vec![T::zero(); v.len()];
    for b in 0..t {
        for i in 0..h {
            let go = &gd[(b * h + i) * c..(b * h + i + 1) * c];
            for j in 0..n {
                let vj = (b * n + j) * c;
                gw[(b * h + i) * n + j] = go.iter().zip(&vd[vj..vj + c]).map(|(&x, &y)| x * y).sum();
                let a = wd[(b * h + i) * n + j];
                for (x, &y) in gv[vj..vj + c].iter_mut().zip(go) {
                    *x += a * y;
                }
            }
        }
    }
    (
        Tensor::new(w.shape(), gw).unwrap(),
        Tensor::new(v.shape(), gv).unwrap(),
    )
}
