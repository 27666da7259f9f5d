//! Final render of an LDM into its target view, and the intermediate render
//! of decoded layers into an input view.

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::geometry::{splat_project, Camera, Frustum, SPLAT_EPS};
use crate::tensor::{Real, Tensor};

use super::Ldm;

/// Graph handles of an activated LDM.
#[derive(Debug, Clone, Copy)]
pub struct LdmVars {
    /// `[L, H, W]`
    pub depth: Var,
    /// `[L, H, W]`
    pub sigma: Var,
    /// `[L, H, W, M]`
    pub beta: Var,
}

impl<T: Real> Graph<T> {
    /// Per-texel blend `sum_m beta_m k_m s_m / sum_m beta_m k_m` of `samples[M, L, H, W, C]`
    /// with weights `beta[L, H, W, M]` and a fixed validity mask `k[M, L, H, W]`.
    /// Texels with no valid view yield 0.
    pub fn masked_blend(&mut self, beta: Var, samples: Var, mask: Tensor<T>) -> Result<Var> {
        let (bv, sv) = (self.value(beta), self.value(samples));
        let ok = sv.ndim() == 5
            && bv.ndim() == 4
            && bv.shape()[..3] == sv.shape()[1..4]
            && bv.shape()[3] == sv.shape()[0]
            && mask.shape() == &sv.shape()[..4];
        if !ok {
            return Err(Error::dim(format!(
                "masked_blend: beta {:?}, samples {:?}, mask {:?}",
                bv.shape(),
                sv.shape(),
                mask.shape()
            )));
        }
        let m = sv.shape()[0];
        let c = sv.shape()[4];
        let n = bv.len() / m;
        let (bd, sd, kd) = (bv.data(), sv.data(), mask.data());
        let mut out = vec![T::zero(); n * c];
        for t in 0..n {
            let mut den = T::zero();
            for v in 0..m {
                den += bd[t * m + v] * kd[v * n + t];
            }
            if den <= T::zero() {
                continue;
            }
            for v in 0..m {
                let w = bd[t * m + v] * kd[v * n + t] / den;
                if w == T::zero() {
                    continue;
                }
                let src = &sd[(v * n + t) * c..(v * n + t + 1) * c];
                for (o, &s) in out[t * c..(t + 1) * c].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let shape = [sv.shape()[1], sv.shape()[2], sv.shape()[3], c];
        let cost = (n * m * (c + 2)) as u64;
        self.push(Tensor::new(&shape, out)?, Op::MaskedBlend { mask }, &[beta, samples], cost)
    }
}

pub(crate) fn masked_blend_backward<T: Real>(
    beta: &Tensor<T>,
    samples: &Tensor<T>,
    mask: &Tensor<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let m = samples.shape()[0];
    let c = samples.shape()[4];
    let n = beta.len() / m;
    let (bd, sd, kd, od, gd) = (beta.data(), samples.data(), mask.data(), out.data(), g.data());
    let mut gb = vec![T::zero(); beta.len()];
    let mut gs = vec![T::zero(); samples.len()];
    for t in 0..n {
        let mut den = T::zero();
        for v in 0..m {
            den += bd[t * m + v] * kd[v * n + t];
        }
        if den <= T::zero() {
            continue;
        }
        let go = &gd[t * c..(t + 1) * c];
        let o = &od[t * c..(t + 1) * c];
        for v in 0..m {
            let k = kd[v * n + t];
            if k == T::zero() {
                continue;
            }
            let base = (v * n + t) * c;
            let w = bd[t * m + v] * k / den;
            let mut acc = T::zero();
            for ch in 0..c {
                gs[base + ch] = w * go[ch];
                acc += go[ch] * (sd[base + ch] - o[ch]);
            }
            gb[t * m + v] = k * acc / den;
        }
    }
    (
        Tensor::new(beta.shape(), gb).unwrap(),
        Tensor::new(samples.shape(), gs).unwrap(),
    )
}

/// Stacks per-view masks `[L, H, W]` into `[M, L, H, W]`, zeroing disabled views.
fn stack_masks<T: Real>(masks: &[Tensor<T>], enabled: Option<&[bool]>) -> Result<Tensor<T>> {
    let mut m = Tensor::stack(masks)?;
    if let Some(en) = enabled {
        let per = m.len() / masks.len();
        for (v, &on) in en.iter().enumerate() {
            if !on {
                m.data_mut()[v * per..(v + 1) * per].fill(T::zero());
            }
        }
    }
    Ok(m)
}

/// Renders an LDM into its target view. `enabled` optionally removes views
/// from the blend (their weight is renormalized away).
pub fn render_target_graph<T: Real>(
    g: &mut Graph<T>,
    frustum: &Frustum,
    ldm: LdmVars,
    images: &[Var],
    cams: &[Camera],
    enabled: Option<&[bool]>,
) -> Result<Var> {
    render_target_covered(g, frustum, ldm, images, cams, enabled).map(|(img, _)| img)
}

/// [`render_target_graph`] that also returns the `[H, W]` coverage map: 1 where
/// every layer is seen by at least one enabled view, 0 elsewhere.
pub fn render_target_covered<T: Real>(
    g: &mut Graph<T>,
    frustum: &Frustum,
    ldm: LdmVars,
    images: &[Var],
    cams: &[Camera],
    enabled: Option<&[bool]>,
) -> Result<(Var, Tensor<T>)> {
    let m = g.shape(ldm.beta).last().copied().unwrap_or(0);
    if cams.len() != m || images.len() != m {
        return Err(Error::contract(format!(
            "render_target: LDM has {m} views, got {} cameras and {} images",
            cams.len(),
            images.len()
        )));
    }
    if enabled.is_some_and(|e| e.len() != m) {
        return Err(Error::contract("render_target: view filter length differs from M"));
    }
    let points = g.layer_points(frustum, ldm.depth)?;
    let (samples, masks) = gather_views(g, images, cams, points)?;
    let mask = stack_masks(&masks, enabled)?;
    let s = g.shape(ldm.depth).to_vec();
    let (layers, per) = (s[0], s[1] * s[2]);
    let md = mask.data();
    let cover = Tensor::from_fn(&s[1..], |p| {
        let all = (0..layers).all(|l| (0..m).any(|v| md[(v * layers + l) * per + p] > T::zero()));
        if all {
            T::one()
        } else {
            T::zero()
        }
    });
    let rgb = g.masked_blend(ldm.beta, samples, mask)?;
    Ok((g.over_composite(rgb, ldm.sigma)?, cover))
}

/// Back-projects every view onto `points`, returning `[M, L, H, W, C]` and per-view masks.
pub fn gather_views<T: Real>(
    g: &mut Graph<T>,
    images: &[Var],
    cams: &[Camera],
    points: Var,
) -> Result<(Var, Vec<Tensor<T>>)> {
    let mut parts = Vec::with_capacity(images.len());
    let mut masks = Vec::with_capacity(images.len());
    for (&img, cam) in images.iter().zip(cams) {
        let (s, k) = g.gather(img, cam, points)?;
        let mut shape = vec![1];
        shape.extend_from_slice(g.shape(s));
        parts.push(g.reshape(s, &shape)?);
        masks.push(k);
    }
    Ok((g.concat(&parts, 0)?, masks))
}

/// Intermediate render into an input view: splats appearance `[L, H, W, Ca]` and
/// density `[L, H, W]` located at `points` into `cam`, then composites.
/// Returns `[Hi, Wi, Ca + 1]` with composited alpha last.
pub fn render_intermediate<T: Real>(
    g: &mut Graph<T>,
    appearance: Var,
    sigma: Var,
    points: Var,
    cam: &Camera,
) -> Result<Var> {
    let s = g.shape(sigma).to_vec();
    let ca = g.shape(appearance)[3];
    let s4 = g.reshape(sigma, &[s[0], s[1], s[2], 1])?;
    let both = g.concat(&[appearance, s4], 3)?;
    let sp = g.splat(both, cam, points, Some(SPLAT_EPS))?;
    let (l, hi, wi) = (s[0], cam.height, cam.width);
    let a = g.narrow(sp, 3, 0, ca)?;
    let sig = g.narrow(sp, 3, ca, 1)?;
    let sig = g.reshape(sig, &[l, hi, wi])?;
    let rgb = g.over_composite(a, sig)?;
    let ones = g.constant(Tensor::ones(&[l, hi, wi, 1]));
    let alpha = g.over_composite(ones, sig)?;
    g.concat(&[rgb, alpha], 2)
}

/// Final render on plain tensors. `exclude` drops one view from the blend.
pub fn render_ldm<T: Real>(
    ldm: &Ldm<T>,
    images: &[Tensor<T>],
    cams: &[Camera],
    exclude: Option<usize>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = ldm.constants(&mut g);
    let imgs: Vec<Var> = images.iter().map(|i| g.constant(i.clone())).collect();
    let enabled: Option<Vec<bool>> = exclude.map(|e| (0..images.len()).map(|v| v != e).collect());
    let out = render_target_graph(&mut g, &ldm.frustum, vars, &imgs, cams, enabled.as_deref())?;
    Ok(g.value(out).clone())
}

/// Depth map composited with the LDM's own densities, `[H, W]`.
pub fn render_depth<T: Real>(ldm: &Ldm<T>) -> Result<Tensor<T>> {
    let s = ldm.depth.shape();
    let mut g = Graph::new();
    let d = g.constant(ldm.depth.reshape(&[s[0], s[1], s[2], 1])?);
    let sig = g.constant(ldm.density.clone());
    let out = g.over_composite(d, sig)?;
    g.value(out).reshape(&[s[1], s[2]])
}

/// Reprojects an LDM into another camera: layer colors are the blended
/// back-projections in layer space, splatted with their densities into `cam`.
/// Returns the `[Hi, Wi, C]` image and a `[Hi, Wi]` coverage map that is 1
/// where every layer lands with total splat weight of at least one half.
pub fn render_to_camera_graph<T: Real>(
    g: &mut Graph<T>,
    frustum: &Frustum,
    ldm: LdmVars,
    images: &[Var],
    cams: &[Camera],
    enabled: Option<&[bool]>,
    cam: &Camera,
) -> Result<(Var, Tensor<T>)> {
    let m = g.shape(ldm.beta).last().copied().unwrap_or(0);
    if cams.len() != m || images.len() != m || enabled.is_some_and(|e| e.len() != m) {
        return Err(Error::contract(format!(
            "render_to_camera: LDM has {m} views, got {} cameras and {} images",
            cams.len(),
            images.len()
        )));
    }
    let points = g.layer_points(frustum, ldm.depth)?;
    let (samples, masks) = gather_views(g, images, cams, points)?;
    let mask = stack_masks(&masks, enabled)?;
    let rgb = g.masked_blend(ldm.beta, samples, mask)?;
    let out = render_intermediate(g, rgb, ldm.sigma, points, cam)?;
    let c = g.shape(rgb)[3];
    let out = g.narrow(out, 2, 0, c)?;

    let s = g.shape(ldm.depth).to_vec();
    let ones = Tensor::ones(&[s[0], s[1], s[2], 1]);
    let weight = splat_project(&ones, cam, g.value(points), None)?;
    let per = cam.height * cam.width;
    let wd = weight.data();
    let half = T::c(0.5);
    let cover = Tensor::from_fn(&[cam.height, cam.width], |p| {
        if (0..s[0]).all(|l| wd[l * per + p] >= half) {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok((out, cover))
}

/// [`render_to_camera_graph`] on plain tensors. `exclude` drops one view from the blend.
pub fn render_ldm_to_camera<T: Real>(
    ldm: &Ldm<T>,
    images: &[Tensor<T>],
    cams: &[Camera],
    cam: &Camera,
    exclude: Option<usize>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = ldm.constants(&mut g);
    let imgs: Vec<Var> = images.iter().map(|i| g.constant(i.clone())).collect();
    let enabled: Option<Vec<bool>> = exclude.map(|e| (0..images.len()).map(|v| v != e).collect());
    let (out, _) = render_to_camera_graph(&mut g, &ldm.frustum, vars, &imgs, cams, enabled.as_deref(), cam)?;
    Ok(g.value(out).clone())
}
