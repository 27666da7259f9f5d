//! Layered depth maps: decoding from a feature volume, compositing and rendering.

pub mod activate;
pub mod composite;
pub mod render;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Frustum;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub use activate::{band_limits, depth_anchors, depth_from_tanh};
pub use composite::over_composite;
pub use render::{
    gather_views, render_depth, render_intermediate, render_ldm, render_ldm_to_camera, render_target_covered,
    render_to_camera_graph,
    render_target_graph, LdmVars,
};

/// Activated LDM in a target frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct Ldm<T> {
    /// `[L, H, W]` z-depth, layer 0 farthest.
    pub depth: Tensor<T>,
    /// `[L, H, W]` opacity in `[0, 1]`.
    pub density: Tensor<T>,
    /// `[L, H, W, M]` per-view blend weights, rows sum to one.
    pub blend: Tensor<T>,
    pub frustum: Frustum,
}

impl<T: Real> Ldm<T> {
    pub fn layers(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.blend.last_dim()
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    pub fn from_graph(g: &Graph<T>, vars: LdmVars, frustum: &Frustum) -> Self {
        Self {
            depth: g.value(vars.depth).clone(),
            density: g.value(vars.sigma).clone(),
            blend: g.value(vars.beta).clone(),
            frustum: frustum.clone(),
        }
    }

    /// Adds the three maps to a graph as constants.
    pub fn constants(&self, g: &mut Graph<T>) -> LdmVars {
        LdmVars {
            depth: g.constant(self.depth.clone()),
            sigma: g.constant(self.density.clone()),
            beta: g.constant(self.blend.clone()),
        }
    }

    /// Checks shapes, band containment of every depth, density range and blend sums.
    pub fn check_invariants(&self) -> Result<()> {
        let s = self.depth.shape();
        if s.len() != 3 || self.density.shape() != s || self.blend.ndim() != 4 || &self.blend.shape()[..3] != s
        {
            return Err(Error::dim(format!(
                "ldm shapes: depth {:?}, density {:?}, blend {:?}",
                s,
                self.density.shape(),
                self.blend.shape()
            )));
        }
        let layers = s[0];
        let per = s[1] * s[2];
        let (near, far) = (T::c(self.frustum.near), T::c(self.frustum.far));
        for (i, &d) in self.depth.data().iter().enumerate() {
            let l = i / per;
            let (lo, hi) = band_limits(l, layers, near, far);
            if !(d >= lo && d <= hi) {
                return Err(Error::contract(format!(
                    "layer {l} depth {d} outside its band [{lo}, {hi}]"
                )));
            }
        }
        if let Some(s) = self
            .density
            .data()
            .iter()
            .find(|&&s| !(s >= T::zero() && s <= T::one()))
        {
            return Err(Error::contract(format!("density {s} outside [0, 1]")));
        }
        let m = self.views();
        for row in self.blend.data().chunks(m) {
            let sum: f64 = row.iter().map(|v| v.f64()).sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&b| b < T::zero()) {
                return Err(Error::contract(format!("blend weights sum to {sum}")));
            }
        }
        Ok(())
    }
}

/// Encoded LDM state.
#[derive(Debug, Clone)]
pub struct FeatureVolume<T> {
    /// `[L, H, W, C]`
    pub v: Tensor<T>,
    pub step: usize,
    pub frustum: Frustum,
}

/// Parameter names of the decode heads.
pub struct DecodeHeads;

impl DecodeHeads {
    pub const SIGMA: &'static str = "heads.sigma";
    pub const DEPTH: &'static str = "heads.depth";
    pub const APPEARANCE: &'static str = "heads.appearance";

    pub fn init<T: Real>(store: &mut ParamStore<T>, channels: usize, appearance: usize) -> Result<()> {
        store.init_uniform(Self::SIGMA, &[channels, 1], channels)?;
        store.init_uniform(Self::DEPTH, &[channels, 1], channels)?;
        store.init_uniform(Self::APPEARANCE, &[channels, appearance], channels)
    }
}

/// `V W` for a single-output head, reshaped to `[L, H, W]`.
pub fn head_logits<T: Real>(g: &mut Graph<T>, v: Var, w: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let y = g.matmul(v, w)?;
    g.reshape(y, &s[..s.len() - 1])
}

/// Depth from `V` through the depth head.
pub fn activate_depth<T: Real>(g: &mut Graph<T>, v: Var, w_d: Var, frustum: &Frustum) -> Result<Var> {
    let x = head_logits(g, v, w_d)?;
    g.depth_activation(x, frustum.near, frustum.far)
}

/// Density from `V` through the density head.
pub fn activate_density<T: Real>(g: &mut Graph<T>, v: Var, w_sigma: Var) -> Result<Var> {
    let x = head_logits(g, v, w_sigma)?;
    g.sigmoid(x)
}

/// Output resolution of an upsample by `s`.
pub fn upsampled_size(h: usize, w: usize, s: f64) -> (usize, usize) {
    (
        ((h as f64 * s).round() as usize).max(1),
        ((w as f64 * s).round() as usize).max(1),
    )
}

/// Bilinearly upsamples depth logits `[L, h, w]`, density logits `[L, h, w]` and
/// blend logits `[L, h, w, M]` by `s`, then activates each.
pub fn upsample_activate<T: Real>(
    g: &mut Graph<T>,
    depth_logits: Var,
    density_logits: Var,
    blend_logits: Var,
    s: f64,
    frustum: &Frustum,
) -> Result<LdmVars> {
    if !(s >= 1.0 && s.is_finite()) {
        return Err(Error::contract(format!("upsample factor {s} must be >= 1")));
    }
    let sh = g.shape(depth_logits).to_vec();
    if sh.len() != 3 || g.shape(density_logits) != sh.as_slice() || g.shape(blend_logits)[..3] != sh[..] {
        return Err(Error::dim("upsample_activate: logit shapes disagree"));
    }
    let (l, h, w) = (sh[0], sh[1], sh[2]);
    let (oh, ow) = upsampled_size(h, w, s);
    let up1 = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let x4 = g.reshape(x, &[l, h, w, 1])?;
        let u = g.bilinear(x4, oh, ow)?;
        g.reshape(u, &[l, oh, ow])
    };
    let dl = up1(g, depth_logits)?;
    let sl = up1(g, density_logits)?;
    let bl = g.bilinear(blend_logits, oh, ow)?;
    Ok(LdmVars {
        depth: g.depth_activation(dl, frustum.near, frustum.far)?,
        sigma: g.sigmoid(sl)?,
        beta: g.softmax(bl, 3)?,
    })
}
