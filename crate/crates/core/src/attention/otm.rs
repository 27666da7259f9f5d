//! One-to-many attention: keys and values are the unprojected inputs, with
//! the key and value projections folded into the query and output matrices.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::standard::{softmax_in_place, vec_mat, StdAttnParams};

#[derive(Debug, Clone)]
pub struct OtmAttnParams<T> {
    /// One `C x C` query matrix per head.
    pub w_q: Vec<Tensor<T>>,
    /// `(h C) x C`
    pub w_o: Tensor<T>,
    pub heads: usize,
    pub channels: usize,
}

impl<T: Real> OtmAttnParams<T> {
    /// Folds standard projections: `W_q[i] = W_Q[i] W_K[i]^T sqrt(C / d_h)` and row
    /// block `i` of the output matrix is `W_V[i] W_O[i d_h .. (i + 1) d_h, :]`.
    pub fn from_standard(p: &StdAttnParams<T>) -> Self {
        let (c, dh) = (p.channels, p.head_dim());
        let ratio = T::c((c as f64).sqrt() / (dh as f64).sqrt());
        let mut w_q = Vec::with_capacity(p.heads);
        let mut w_o = vec![T::zero(); p.heads * c * c];
        for i in 0..p.heads {
            let (wq, wk, wv) = (p.w_q[i].data(), p.w_k[i].data(), p.w_v[i].data());
            let mut m = vec![T::zero(); c * c];
            for r in 0..c {
                for s in 0..c {
                    let mut acc = T::zero();
                    for k in 0..dh {
                        acc += wq[r * dh + k] * wk[s * dh + k];
                    }
                    m[r * c + s] = acc * ratio;
                }
            }
            w_q.push(Tensor::new(&[c, c], m).unwrap());
            let wo = p.w_o.data();
            for r in 0..c {
                for s in 0..c {
                    let mut acc = T::zero();
                    for k in 0..dh {
                        acc += wv[r * dh + k] * wo[(i * dh + k) * c + s];
                    }
                    w_o[(i * c + r) * c + s] = acc;
                }
            }
        }
        Self {
            w_q,
            w_o: Tensor::new(&[p.heads * c, c], w_o).unwrap(),
            heads: p.heads,
            channels: c,
        }
    }

    /// Query matrices side by side, `C x (h C)`, the layout used by graph parameters.
    pub fn w_q_concat(&self) -> Tensor<T> {
        let c = self.channels;
        let hc = self.heads * c;
        let mut out = vec![T::zero(); c * hc];
        for (i, m) in self.w_q.iter().enumerate() {
            for r in 0..c {
                out[r * hc + i * c..r * hc + (i + 1) * c].copy_from_slice(&m.data()[r * c..(r + 1) * c]);
            }
        }
        Tensor::new(&[c, hc], out).unwrap()
    }
}

/// One query `q[C]` attending over `deltas[N, C]`, returning `[C]`.
pub fn one_to_many_attention<T: Real>(q: &Tensor<T>, deltas: &Tensor<T>, p: &OtmAttnParams<T>) -> Result<Tensor<T>> {
    let c = p.channels;
    if q.shape() != [c] || deltas.ndim() != 2 || deltas.shape()[1] != c || deltas.shape()[0] == 0 {
        return Err(Error::dim(format!(
            "one_to_many_attention: q {:?}, deltas {:?}, C = {c}",
            q.shape(),
            deltas.shape()
        )));
    }
    let n = deltas.shape()[0];
    let scale = T::one() / T::c(c as f64).sqrt();
    let dd = deltas.data();
    let mut concat = vec![T::zero(); p.heads * c];
    let mut qi = vec![T::zero(); c];
    let mut scores = vec![T::zero(); n];
    for i in 0..p.heads {
        vec_mat(q.data(), p.w_q[i].data(), c, &mut qi);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = scale * qi.iter().zip(&dd[j * c..(j + 1) * c]).map(|(&a, &b)| a * b).sum::<T>();
        }
        softmax_in_place(&mut scores);
        let head = &mut concat[i * c..(i + 1) * c];
        for (j, &w) in scores.iter().enumerate() {
            for (h, &d) in head.iter_mut().zip(&dd[j * c..(j + 1) * c]) {
                *h += w * d;
            }
        }
    }
    let mut out = vec![T::zero(); c];
    vec_mat(&concat, p.w_o.data(), c, &mut out);
    Tensor::new(&[c], out)
}

/// Batched one-to-many attention on the graph.
///
/// `q[T, C]`, `deltas[T, N, C]`, `w_q[C, h C]`, `w_o[h C, C]`. With `zero_keys`
/// the scores are taken against zeros, so every head averages the deltas.
pub fn one_to_many_graph<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    deltas: Var,
    w_q: Var,
    w_o: Var,
    heads: usize,
    zero_keys: bool,
) -> Result<Var> {
    let ds = g.shape(deltas).to_vec();
    if ds.len() != 3 {
        return Err(Error::dim(format!("one_to_many: deltas must be [T, N, C], got {ds:?}")));
    }
    let (t, c) = (ds[0], ds[2]);
    let qh = g.matmul(q, w_q)?;
    let qh = g.reshape(qh, &[t, heads, c])?;
    let keys = if zero_keys {
        g.constant(Tensor::zeros(&ds))
    } else {
        deltas
    };
    let s = g.attention_scores(qh, keys, 1.0 / (c as f64).sqrt())?;
    let w = g.softmax(s, 2)?;
    let mix = g.attention_mix(w, deltas)?;
    let mix = g.reshape(mix, &[t, heads * c])?;
    g.matmul(mix, w_o)
}
