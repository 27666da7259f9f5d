//! Layer points, bilinear gather (back-projection) and bilinear splat (projection).
//!
//! Gather and splat share one tap rule, so with normalization off they are
//! exact adjoints of each other.

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::camera::{CamKernel, Camera, Frustum};

/// Default footprint floor for normalized splatting.
pub const SPLAT_EPS: f64 = 1e-4;

/// Bilinear footprint of one projected point.
pub(crate) struct Tap<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    /// Derivatives of the four weights w.r.t. continuous pixel `u` and `v`.
    pub dw_du: [T; 4],
    pub dw_dv: [T; 4],
    /// Point in camera coordinates.
    pub q: [T; 3],
}

fn axis_tap<T: Real>(coord: T, n: usize) -> (usize, usize, T, bool) {
    let s = coord - T::c(0.5);
    let hi = T::c((n - 1) as f64);
    let free = s > T::zero() && s < hi;
    let s = s.max(T::zero()).min(hi);
    let i0 = s.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - T::c(i0 as f64), free)
}

/// Taps for world point `p`, `None` when it falls behind the camera or outside the image.
pub(crate) fn tap<T: Real>(cam: &CamKernel<T>, p: [T; 3]) -> Option<Tap<T>> {
    let q = cam.to_camera(p);
    if q[2] <= T::zero() {
        return None;
    }
    let u = cam.fx * q[0] / q[2] + cam.cx;
    let v = cam.fy * q[1] / q[2] + cam.cy;
    let (wf, hf) = (T::c(cam.width as f64), T::c(cam.height as f64));
    if !(u >= T::zero() && u <= wf && v >= T::zero() && v <= hf) {
        return None;
    }
    let (x0, x1, fx, xfree) = axis_tap(u, cam.width);
    let (y0, y1, fy, yfree) = axis_tap(v, cam.height);
    let one = T::one();
    let w = [
        (one - fy) * (one - fx),
        (one - fy) * fx,
        fy * (one - fx),
        fy * fx,
    ];
    let z = T::zero();
    let dw_du = if xfree {
        [-(one - fy), one - fy, -fy, fy]
    } else {
        [z; 4]
    };
    let dw_dv = if yfree {
        [-(one - fx), -fx, one - fx, fx]
    } else {
        [z; 4]
    };
    let wd = cam.width;
    Some(Tap {
        idx: [y0 * wd + x0, y0 * wd + x1, y1 * wd + x0, y1 * wd + x1],
        w,
        dw_du,
        dw_dv,
        q,
    })
}

/// World-space gradient from gradients w.r.t. continuous pixel coordinates.
fn point_grad<T: Real>(cam: &CamKernel<T>, q: [T; 3], gu: T, gv: T) -> [T; 3] {
    let iz = T::one() / q[2];
    let gq = [
        gu * cam.fx * iz,
        gv * cam.fy * iz,
        -(gu * cam.fx * q[0] + gv * cam.fy * q[1]) * iz * iz,
    ];
    cam.rotate_back(gq)
}

fn check_points(shape: &[usize], op: &str) -> Result<usize> {
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::dim(format!("{op}: points must be [L, H, W, 3], got {shape:?}")));
    }
    Ok(shape[0] * shape[1] * shape[2])
}

fn point_at<T: Real>(pd: &[T], i: usize) -> [T; 3] {
    [pd[3 * i], pd[3 * i + 1], pd[3 * i + 2]]
}

/// Unit-z world ray directions through the centers of an `h` x `w` grid laid over the camera image.
pub(crate) fn grid_directions<T: Real>(cam: &Camera, h: usize, w: usize) -> Vec<[T; 3]> {
    let sx = cam.width as f64 / w as f64;
    let sy = cam.height as f64 / h as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d = cam.ray_direction((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy);
            out.push([T::c(d.x), T::c(d.y), T::c(d.z)]);
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// World positions of layer texels at z-depth `depth[L, H, W]` in the target frustum.
    pub fn layer_points(&mut self, frustum: &Frustum, depth: Var) -> Result<Var> {
        let dv = self.value(depth);
        if dv.ndim() != 3 {
            return Err(Error::dim(format!(
                "layer_world_points: depth must be [L, H, W], got {:?}",
                dv.shape()
            )));
        }
        let lo = T::c(frustum.near * (1.0 - 1e-5));
        let hi = T::c(frustum.far * (1.0 + 1e-5));
        if let Some(bad) = dv.data().iter().find(|&&d| !(d >= lo && d <= hi)) {
            return Err(Error::contract(format!(
                "layer_world_points: depth {bad} outside [{}, {}]",
                frustum.near, frustum.far
            )));
        }
        let (l, h, w) = (dv.shape()[0], dv.shape()[1], dv.shape()[2]);
        let dirs: Vec<[T; 3]> = grid_directions(&frustum.camera, h, w);
        let c = frustum.camera.center();
        let c = [T::c(c.x), T::c(c.y), T::c(c.z)];
        let mut out = Vec::with_capacity(l * h * w * 3);
        for (i, &d) in dv.data().iter().enumerate() {
            let r = dirs[i % (h * w)];
            for k in 0..3 {
                out.push(c[k] + d * r[k]);
            }
        }
        let t = Tensor::new(&[l, h, w, 3], out)?;
        let cost = 3 * dv.len() as u64;
        self.push(t, Op::LayerPoints { dirs }, &[depth], cost)
    }

    /// Bilinear samples of `image[Hi, Wi, C]` at the projections of `points[L, H, W, 3]`.
    /// Also returns the validity mask `[L, H, W]`.
    pub fn gather(&mut self, image: Var, cam: &Camera, points: Var) -> Result<(Var, Tensor<T>)> {
        let (iv, pv) = (self.value(image), self.value(points));
        let n = check_points(pv.shape(), "gather_backproject")?;
        if iv.ndim() != 3 || iv.shape()[0] != cam.height || iv.shape()[1] != cam.width {
            return Err(Error::dim(format!(
                "gather_backproject: image {:?} for a {}x{} camera",
                iv.shape(),
                cam.width,
                cam.height
            )));
        }
        let c = iv.shape()[2];
        let k = cam.kernel::<T>();
        let (id, pd) = (iv.data(), pv.data());
        let mut out = vec![T::zero(); n * c];
        let mut mask = vec![T::zero(); n];
        for i in 0..n {
            let Some(tp) = tap(&k, point_at(pd, i)) else { continue };
            mask[i] = T::one();
            let o = &mut out[i * c..(i + 1) * c];
            for t in 0..4 {
                let src = &id[tp.idx[t] * c..(tp.idx[t] + 1) * c];
                for (a, &s) in o.iter_mut().zip(src) {
                    *a += tp.w[t] * s;
                }
            }
        }
        let s = pv.shape();
        let out = Tensor::new(&[s[0], s[1], s[2], c], out)?;
        let mask = Tensor::new(&s[..3], mask)?;
        let cost = (n * (4 * c + 24)) as u64;
        let v = self.push(out, Op::Gather { cam: k }, &[image, points], cost)?;
        Ok((v, mask))
    }

    /// Bilinear scatter of `values[L, H, W, C]` into the camera image. With
    /// `normalize_eps = Some(e)` every pixel is divided by `max(weight_sum, e)`.
    pub fn splat(&mut self, values: Var, cam: &Camera, points: Var, normalize_eps: Option<f64>) -> Result<Var> {
        let (vv, pv) = (self.value(values), self.value(points));
        let n = check_points(pv.shape(), "splat_project")?;
        if vv.ndim() != 4 || vv.shape()[..3] != pv.shape()[..3] {
            return Err(Error::dim(format!(
                "splat_project: values {:?} vs points {:?}",
                vv.shape(),
                pv.shape()
            )));
        }
        let (l, c) = (vv.shape()[0], vv.shape()[3]);
        let per_layer = n / l.max(1);
        let (hi, wi) = (cam.height, cam.width);
        let k = cam.kernel::<T>();
        let (vd, pd) = (vv.data(), pv.data());
        let mut acc = vec![T::zero(); l * hi * wi * c];
        let mut ws = vec![T::zero(); if normalize_eps.is_some() { l * hi * wi } else { 0 }];
        for i in 0..n {
            let Some(tp) = tap(&k, point_at(pd, i)) else { continue };
            let layer = i / per_layer;
            let src = &vd[i * c..(i + 1) * c];
            for t in 0..4 {
                let pix = layer * hi * wi + tp.idx[t];
                for (a, &s) in acc[pix * c..(pix + 1) * c].iter_mut().zip(src) {
                    *a += tp.w[t] * s;
                }
                if !ws.is_empty() {
                    ws[pix] += tp.w[t];
                }
            }
        }
        let eps = normalize_eps.map(T::c);
        if let Some(e) = eps {
            for (row, &s) in acc.chunks_mut(c).zip(&ws) {
                let d = s.max(e);
                for a in row {
                    *a /= d;
                }
            }
        }
        let out = Tensor::new(&[l, hi, wi, c], acc)?;
        let cost = (n * (4 * c + 24) + ws.len() * c) as u64;
        self.push(
            out,
            Op::Splat {
                cam: k,
                eps,
                weight_sum: ws,
            },
            &[values, points],
            cost,
        )
    }
}

pub(crate) fn layer_points_backward<T: Real>(dirs: &[[T; 3]], g: &Tensor<T>) -> Vec<T> {
    let n = g.len() / 3;
    let gd = g.data();
    (0..n)
        .map(|i| {
            let r = dirs[i % dirs.len()];
            gd[3 * i] * r[0] + gd[3 * i + 1] * r[1] + gd[3 * i + 2] * r[2]
        })
        .collect()
}

#[allow(clippy::type_complexity)]
pub(crate) fn gather_backward<T: Real>(
    cam: &CamKernel<T>,
    image: &Tensor<T>,
    points: &Tensor<T>,
    g: &Tensor<T>,
    need_image: bool,
    need_points: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let c = image.shape()[2];
    let n = points.len() / 3;
    let (id, pd, gd) = (image.data(), points.data(), g.data());
    let mut gi = need_image.then(|| vec![T::zero(); image.len()]);
    let mut gp = need_points.then(|| vec![T::zero(); points.len()]);
    for i in 0..n {
        let Some(tp) = tap(cam, point_at(pd, i)) else { continue };
        let go = &gd[i * c..(i + 1) * c];
        if let Some(gi) = gi.as_mut() {
            for t in 0..4 {
                for (a, &v) in gi[tp.idx[t] * c..(tp.idx[t] + 1) * c].iter_mut().zip(go) {
                    *a += tp.w[t] * v;
                }
            }
        }
        if let Some(gp) = gp.as_mut() {
            let (mut gu, mut gv) = (T::zero(), T::zero());
            for t in 0..4 {
                let s: T = id[tp.idx[t] * c..(tp.idx[t] + 1) * c]
                    .iter()
                    .zip(go)
                    .map(|(&a, &b)| a * b)
                    .sum();
                gu += tp.dw_du[t] * s;
                gv += tp.dw_dv[t] * s;
            }
            let wp = point_grad(cam, tp.q, gu, gv);
            gp[3 * i..3 * i + 3].copy_from_slice(&wp);
        }
    }
    (
        gi.map(|d| Tensor::new(image.shape(), d).unwrap()),
        gp.map(|d| Tensor::new(points.shape(), d).unwrap()),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn splat_backward<T: Real>(
    cam: &CamKernel<T>,
    eps: Option<T>,
    values: &Tensor<T>,
    points: &Tensor<T>,
    out: &Tensor<T>,
    weight_sum: &[T],
    g: &Tensor<T>,
    need_points: bool,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let (l, c) = (values.shape()[0], values.shape()[3]);
    let n = points.len() / 3;
    let per_layer = n / l.max(1);
    let npix = cam.height * cam.width;
    // gradient w.r.t. the unnormalized accumulator and the weight sums
    let (gacc, gws): (Vec<T>, Vec<T>) = match eps {
        None => (g.data().to_vec(), Vec::new()),
        Some(e) => {
            let mut ga = g.data().to_vec();
            let mut gw = vec![T::zero(); l * npix];
            for p in 0..l * npix {
                let s = weight_sum[p];
                let d = s.max(e);
                let row = p * c..(p + 1) * c;
                if s > e {
                    gw[p] = -g.data()[row.clone()]
                        .iter()
                        .zip(&out.data()[row.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>()
                        / d;
                }
                for a in &mut ga[row] {
                    *a /= d;
                }
            }
            (ga, gw)
        }
    };
    let (vd, pd) = (values.data(), points.data());
    let mut gv = vec![T::zero(); values.len()];
    let mut gp = need_points.then(|| vec![T::zero(); points.len()]);
    for i in 0..n {
        let Some(tp) = tap(cam, point_at(pd, i)) else { continue };
        let layer = i / per_layer;
        let src = &vd[i * c..(i + 1) * c];
        let (mut gu, mut gvv) = (T::zero(), T::zero());
        for t in 0..4 {
            let pix = layer * npix + tp.idx[t];
            let grow = &gacc[pix * c..(pix + 1) * c];
            for (a, &b) in gv[i * c..(i + 1) * c].iter_mut().zip(grow) {
                *a += tp.w[t] * b;
            }
            if gp.is_some() {
                let mut s: T = src.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                if !gws.is_empty() {
                    s += gws[pix];
                }
                gu += tp.dw_du[t] * s;
                gvv += tp.dw_dv[t] * s;
            }
        }
        if let Some(gp) = gp.as_mut() {
            let wp = point_grad(cam, tp.q, gu, gvv);
            gp[3 * i..3 * i + 3].copy_from_slice(&wp);
        }
    }
    (
        Tensor::new(values.shape(), gv).unwrap(),
        gp.map(|d| Tensor::new(points.shape(), d).unwrap()),
    )
}

/// World positions of layer texels (graph-free convenience form).
pub fn layer_world_points<T: Real>(frustum: &Frustum, depth: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let d = g.constant(depth.clone());
    let p = g.layer_points(frustum, d)?;
    Ok(g.value(p).clone())
}

/// Back-projection of `image` onto `points` (graph-free convenience form).
pub fn gather_backproject<T: Real>(
    image: &Tensor<T>,
    cam: &Camera,
    points: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let i = g.constant(image.clone());
    let p = g.constant(points.clone());
    let (v, m) = g.gather(i, cam, p)?;
    Ok((g.value(v).clone(), m))
}

/// Splat of `values` into `cam` (graph-free convenience form).
pub fn splat_project<T: Real>(
    values: &Tensor<T>,
    cam: &Camera,
    points: &Tensor<T>,
    normalize_eps: Option<f64>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(values.clone());
    let p = g.constant(points.clone());
    let s = g.splat(v, cam, p, normalize_eps)?;
    Ok(g.value(s).clone())
}
