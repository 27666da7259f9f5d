//! Depth anchors and the banded depth activation.

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Disparity-band centers `(l - 0.5) / L` for `l = 1..=L`, ascending.
pub fn depth_anchors(layers: usize) -> Result<Vec<f64>> {
    if layers == 0 {
        return Err(Error::contract("depth_anchors needs at least one layer"));
    }
    Ok((0..layers)
        .map(|l| (l as f64 + 0.5) / layers as f64)
        .collect())
}

/// Depth of layer `layer` (0-based, 0 = far) for a tanh output `t` in `[-1, 1]`.
#[inline]
pub fn depth_from_tanh<T: Real>(layer: usize, layers: usize, near: T, far: T, t: T) -> T {
    let lf = T::c(layers as f64);
    let anchor = (T::c(layer as f64) + T::c(0.5)) / lf;
    let disp = (anchor + T::c(0.5) / lf * t) * (T::one() / near - T::one() / far) + T::one() / far;
    T::one() / disp
}

/// Depth interval `[nearest, farthest]` reachable by layer `layer`.
pub fn band_limits<T: Real>(layer: usize, layers: usize, near: T, far: T) -> (T, T) {
    (
        depth_from_tanh(layer, layers, near, far, T::one()),
        depth_from_tanh(layer, layers, near, far, -T::one()),
    )
}

impl<T: Real> Graph<T> {
    /// Banded depth from raw logits `x[L, ...]`; the leading axis indexes layers.
    pub fn depth_activation(&mut self, x: Var, near: f64, far: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() == 0 || vx.shape()[0] == 0 {
            return Err(Error::dim("activate_depth: input needs a leading layer axis"));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::contract(format!(
                "activate_depth: need 0 < near < far, got {near}, {far}"
            )));
        }
        let layers = vx.shape()[0];
        let per = vx.len() / layers;
        let (n, f) = (T::c(near), T::c(far));
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| depth_from_tanh(i / per, layers, n, f, v.tanh()))
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let cost = 6 * out.len() as u64;
        self.push(out, Op::DepthAct { near: n, far: f }, &[x], cost)
    }
}

pub(crate) fn depth_activation_backward<T: Real>(
    x: &Tensor<T>,
    d: &Tensor<T>,
    near: T,
    far: T,
    g: &Tensor<T>,
) -> Tensor<T> {
    let layers = x.shape()[0];
    let k = T::c(0.5 / layers as f64) * (T::one() / near - T::one() / far);
    let data = x
        .data()
        .iter()
        .zip(d.data())
        .zip(g.data())
        .map(|((&xv, &dv), &gv)| {
            let t = xv.tanh();
            -gv * dv * dv * k * (T::one() - t * t)
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_examples() {
        assert_eq!(depth_anchors(1).unwrap(), vec![0.5]);
        assert_eq!(depth_anchors(4).unwrap(), vec![0.125, 0.375, 0.625, 0.875]);
        assert!(depth_anchors(0).is_err());
        let a = depth_anchors(7).unwrap();
        for w in a.windows(2) {
            assert!((w[1] - w[0] - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_logit_single_layer() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 1]));
        let d = g.depth_activation(x, 1.0, 3.0).unwrap();
        assert!((g.value(d).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_hit_band_edges() {
        let (near, far, layers) = (2.0, 12.0, 4);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[layers, 2], |i| if i % 2 == 0 { 40.0 } else { -40.0 }));
        let d = g.depth_activation(x, near, far).unwrap();
        let dv = g.value(d);
        let span = 1.0 / near - 1.0 / far;
        for l in 0..layers {
            let anchor = (l as f64 + 0.5) / layers as f64;
            let hi_disp = (anchor + 0.5 / layers as f64) * span + 1.0 / far;
            let lo_disp = (anchor - 0.5 / layers as f64) * span + 1.0 / far;
            assert!((1.0 / dv.get(&[l, 0]) - hi_disp).abs() < 1e-12);
            assert!((1.0 / dv.get(&[l, 1]) - lo_disp).abs() < 1e-12);
        }
        // layer 0 far edge is the far plane, last layer near edge the near plane
        assert!((dv.get(&[0, 1]) - far).abs() < 1e-9);
        assert!((dv.get(&[layers - 1, 0]) - near).abs() < 1e-9);
    }
}
