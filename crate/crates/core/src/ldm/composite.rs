//! Back-to-front over compositing.

use crate::autodiff::{fault, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// Composites `values[L, H, W, C]` with opacities `sigma[L, H, W]`, layer 0 first (farthest).
    pub fn over_composite(&mut self, values: Var, sigma: Var) -> Result<Var> {
        let (vv, sv) = (self.value(values), self.value(sigma));
        if vv.ndim() != 4 || sv.shape() != &vv.shape()[..3] {
            return Err(Error::dim(format!(
                "over_composite: values {:?} vs sigma {:?}",
                vv.shape(),
                sv.shape()
            )));
        }
        let (l, c) = (vv.shape()[0], vv.shape()[3]);
        let pix = vv.shape()[1] * vv.shape()[2];
        let (vd, sd) = (vv.data(), sv.data());
        let mut out = vec![T::zero(); pix * c];
        let mut partial = Vec::with_capacity(l * pix * c);
        for layer in 0..l {
            partial.extend_from_slice(&out);
            for p in 0..pix {
                let s = sd[layer * pix + p];
                let src = &vd[(layer * pix + p) * c..(layer * pix + p + 1) * c];
                for (o, &v) in out[p * c..(p + 1) * c].iter_mut().zip(src) {
                    *o = v * s + (T::one() - s) * *o;
                }
            }
        }
        let t = Tensor::new(&vv.shape()[1..], out)?;
        let cost = 3 * vv.len() as u64;
        self.push(t, Op::OverComposite { partial }, &[values, sigma], cost)
    }
}

pub(crate) fn over_composite_backward<T: Real>(
    values: &Tensor<T>,
    sigma: &Tensor<T>,
    partial: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (l, c) = (values.shape()[0], values.shape()[3]);
    let pix = values.shape()[1] * values.shape()[2];
    let (vd, sd) = (values.data(), sigma.data());
    let flip = fault::flip_over_composite();
    let mut gout = g.data().to_vec();
    let mut gv = vec![T::zero(); values.len()];
    let mut gs = vec![T::zero(); sigma.len()];
    for layer in (0..l).rev() {
        for p in 0..pix {
            let s = sd[layer * pix + p];
            let base = (layer * pix + p) * c;
            let mut acc = T::zero();
            for ch in 0..c {
                let go = gout[p * c + ch];
                gv[base + ch] = go * s;
                acc += go * (vd[base + ch] - partial[base + ch]);
                gout[p * c + ch] = go * (T::one() - s);
            }
            gs[layer * pix + p] = if flip { -acc } else { acc };
        }
    }
    (
        Tensor::new(values.shape(), gv).unwrap(),
        Tensor::new(sigma.shape(), gs).unwrap(),
    )
}

/// Over composite on plain tensors.
pub fn over_composite<T: Real>(values: &Tensor<T>, sigma: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(values.clone());
    let s = g.constant(sigma.clone());
    let o = g.over_composite(v, s)?;
    Ok(g.value(o).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opaque_single_layer() {
        let v = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| i as f64 * 0.1);
        let out = over_composite(&v, &Tensor::ones(&[1, 2, 2])).unwrap();
        assert_eq!(out, v.index0(0));
    }

    #[test]
    fn transparent_is_black() {
        let v = Tensor::<f64>::ones(&[3, 2, 2, 3]);
        let out = over_composite(&v, &Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_layer_expansion() {
        let (a, b) = (0.8, 0.2);
        let v = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[a, b]).unwrap();
        let s = Tensor::from_f64(&[2, 1, 1], &[1.0, 0.25]).unwrap();
        let out = over_composite(&v, &s).unwrap();
        assert!((out.item() - (0.25 * b + 0.75 * a)).abs() < 1e-15);
    }
}
