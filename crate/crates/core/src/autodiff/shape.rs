use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::graph::{Graph, Op, Var};
use super::nn::axis_split;

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape, &[x], 0)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "permute: {perm:?} is not a permutation of {n} axes"
            )));
        }
        let in_shape = vx.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = vx.len();
        let mut src_index = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            src_index.push(idx.iter().zip(&strides).map(|(a, b)| a * b).sum());
            for ax in (0..n).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let data = src_index.iter().map(|&s| vx.data()[s]).collect();
        let out = Tensor::new(&out_shape, data)?;
        self.push(out, Op::Permute { src_index }, &[x], 0)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || start + len > vx.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow: axis {axis} range {start}..{} on {:?}",
                start + len,
                vx.shape()
            )));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Narrow { axis, start }, &[x], 0)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let vv = self.value(v);
                let chunk = vv.shape()[axis] * inner;
                data.extend_from_slice(&vv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat { axis }, xs, 0)
    }

    /// Repeats `x` over new leading axes `lead`.
    pub fn broadcast(&mut self, x: Var, lead: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let reps: usize = lead.iter().product();
        let mut data = Vec::with_capacity(reps * vx.len());
        for _ in 0..reps {
            data.extend_from_slice(vx.data());
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(vx.shape());
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Broadcast, &[x], 0)
    }
}

pub(super) fn permute_backward<T: Real>(in_shape: &[usize], src_index: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.len()];
    for (&s, &v) in src_index.iter().zip(g.data()) {
        out[s] = v;
    }
    Tensor::new(in_shape, out).unwrap()
}

pub(super) fn narrow_backward<T: Real>(in_shape: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(in_shape, out).unwrap()
}

pub(super) fn concat_backward<T: Real>(shapes: &[&[usize]], axis: usize, g: &Tensor<T>) -> Vec<Tensor<T>> {
    let (outer, total, inner) = axis_split(g.shape(), axis);
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for o in 0..outer {
        let mut off = (o * total) * inner;
        for (p, s) in parts.iter_mut().zip(shapes) {
            let chunk = s[axis] * inner;
            p.extend_from_slice(&g.data()[off..off + chunk]);
            off += chunk;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(p, s)| Tensor::new(s, p).unwrap())
        .collect()
}

pub(super) fn broadcast_backward<T: Real>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let n: usize = in_shape.iter().product();
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n.max(1)) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(in_shape, out).unwrap()
}
