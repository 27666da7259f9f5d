//! Ray directional encoding of input-view pixels relative to the target frustum.

use nalgebra::Vector3;

use crate::tensor::{Real, Tensor};

use super::camera::{Camera, Frustum};

/// Upper bound on the ray parameter when a plane is missed or hit behind the origin.
pub const T_MAX: f64 = 1e4;
const NDC_CLAMP: f64 = 1e4;
// keeps tanh strictly inside (-1, 1) in f64
const DIFF_CLAMP: f64 = 15.0;

/// Encoding hyperparameters. The per-level projection lives in the network parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RayEncodingParams {
    pub octaves: usize,
}

impl Default for RayEncodingParams {
    fn default() -> Self {
        Self { octaves: 8 }
    }
}

impl RayEncodingParams {
    /// Encoding width before projection: sin and cos per octave for two axes.
    pub fn raw_dim(&self) -> usize {
        4 * self.octaves
    }
}

fn plane_hit(o: &Vector3<f64>, d: &Vector3<f64>, z: f64) -> Vector3<f64> {
    let t = (z - o.z) / d.z;
    let t = if t.is_finite() && t >= 0.0 { t.min(T_MAX) } else { T_MAX };
    o + d * t
}

fn ndc(cam: &Camera, p: &Vector3<f64>) -> (f64, f64) {
    let z = if p.z.abs() < 1e-9 { 1e-9f64.copysign(p.z) } else { p.z };
    let x = 2.0 * (cam.fx * p.x / z + cam.cx) / cam.width as f64 - 1.0;
    let y = 2.0 * (cam.fy * p.y / z + cam.cy) / cam.height as f64 - 1.0;
    (x.clamp(-NDC_CLAMP, NDC_CLAMP), y.clamp(-NDC_CLAMP, NDC_CLAMP))
}

/// `tanh` of the NDC difference between far- and near-plane hits, `[h, w, 2]`.
pub fn ray_difference(input_cam: &Camera, frustum: &Frustum, h: usize, w: usize) -> Tensor<f64> {
    let tc = &frustum.camera;
    let r = tc.rotation();
    let o = tc.world_to_camera(&input_cam.center());
    let sx = input_cam.width as f64 / w as f64;
    let sy = input_cam.height as f64 / h as f64;
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            let d = r * input_cam.ray_direction((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy);
            let near = ndc(tc, &plane_hit(&o, &d, frustum.near));
            let far = ndc(tc, &plane_hit(&o, &d, frustum.far));
            out.push((far.0 - near.0).clamp(-DIFF_CLAMP, DIFF_CLAMP).tanh());
            out.push((far.1 - near.1).clamp(-DIFF_CLAMP, DIFF_CLAMP).tanh());
        }
    }
    Tensor::new(&[h, w, 2], out).unwrap()
}

/// Sinusoidal encoding `[h, w, 4 * octaves]`: for each axis and octave, `sin` then `cos`
/// of `2^o * pi * e`.
pub fn ray_encoding<T: Real>(
    input_cam: &Camera,
    frustum: &Frustum,
    h: usize,
    w: usize,
    params: &RayEncodingParams,
) -> Tensor<T> {
    let e = ray_difference(input_cam, frustum, h, w);
    let k = params.octaves;
    let mut out = Vec::with_capacity(h * w * 4 * k);
    for px in e.data().chunks(2) {
        for &v in px {
            for o in 0..k {
                let a = (1u64 << o) as f64 * std::f64::consts::PI * v;
                out.push(T::c(a.sin()));
                out.push(T::c(a.cos()));
            }
        }
    }
    Tensor::new(&[h, w, 4 * k], out).unwrap()
}
