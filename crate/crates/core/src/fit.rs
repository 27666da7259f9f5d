//! Optimization harnesses: direct LDM fitting and nano-network overfitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Frustum};
use crate::ldm::{render_target_covered, render_to_camera_graph, Ldm, LdmVars};
use crate::network::{self, ModelConfig};
use crate::params::ParamStore;
use crate::scenes::{make_scene, oracle_render, RigSpec};
use crate::tensor::{Real, Tensor};

pub const DEPTH_LOGITS: &str = "ldm.depth";
pub const DENSITY_LOGITS: &str = "ldm.density";
pub const BLEND_LOGITS: &str = "ldm.blend";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l1_weight: f64,
    /// Multiplier on the learning rate of depth logits in the direct fit.
    pub depth_lr_scale: f64,
    /// Multiplier on the learning rate of blend logits in the direct fit.
    pub blend_lr_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l1_weight: 10.0,
            depth_lr_scale: 0.1,
            blend_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    /// Zero steps is allowed and means "return the initialization".
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::schema("lr", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::schema("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::schema("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::schema("eps", "must be > 0"));
        }
        if !(self.l1_weight > 0.0 && self.l1_weight.is_finite()) {
            return Err(Error::schema("l1_weight", "must be finite and > 0"));
        }
        if !(self.depth_lr_scale > 0.0 && self.depth_lr_scale.is_finite()) {
            return Err(Error::schema("depth_lr_scale", "must be finite and > 0"));
        }
        if !(self.blend_lr_scale >= 0.0 && self.blend_lr_scale.is_finite()) {
            return Err(Error::schema("blend_lr_scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Adam over every parameter that receives a gradient. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &FitConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update; `lr_of` gives the learning rate per parameter name.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads.params() {
            let Some(g) = g else { continue };
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter '{name}'")))?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let lr = lr_of(name);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x = T::c(x.f64() - upd);
            }
        }
        Ok(())
    }
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    psnr_masked(a, b, None)
}

/// PSNR over the pixels where `mask[H, W]` is nonzero.
pub fn psnr_masked<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("psnr: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let c = if a.ndim() == 3 { a.last_dim() } else { 1 };
    if let Some(m) = mask {
        if m.len() * c != a.len() {
            return Err(Error::dim(format!("psnr mask {:?} for image {:?}", m.shape(), a.shape())));
        }
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i / c] == T::zero()) {
            continue;
        }
        let d = x.f64() - y.f64();
        se += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("psnr over an empty mask"));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub losses: Vec<f64>,
    /// Final PSNR per evaluation view.
    pub psnr: Vec<(String, f64)>,
    /// Fraction of pixels of the first evaluation view the loss and PSNR were measured on.
    pub coverage: f64,
    pub seconds: f64,
}

impl FitReport {
    /// Loss curve as `step,loss` rows, then `#`-prefixed summary lines. Wall
    /// time is left out so reports are reproducible byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:.9e}");
        }
        for (name, p) in &self.psnr {
            let _ = writeln!(s, "# psnr_db,{name},{p:.6}");
        }
        let _ = writeln!(s, "# coverage,{:.6}", self.coverage);
        s
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.psnr.first().map(|p| p.1)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Input views and the one whose frustum holds the LDM.
#[derive(Debug, Clone)]
pub struct FitProblem<T> {
    pub images: Vec<Tensor<T>>,
    pub cams: Vec<Camera>,
    pub target: Frustum,
    pub target_index: usize,
    /// Also render into every other input view. A single held-out render
    /// constrains colors but not depth, since per-texel blending can match
    /// them at any depth.
    pub reproject: bool,
}

impl<T: Real> FitProblem<T> {
    /// LDM in the frustum of view `index`. Each view is rendered from the others.
    pub fn leave_one_out(images: Vec<Tensor<T>>, cams: Vec<Camera>, near: f64, far: f64, index: usize) -> Result<Self> {
        if images.len() != cams.len() {
            return Err(Error::contract(format!(
                "{} images for {} cameras",
                images.len(),
                cams.len()
            )));
        }
        if cams.len() < 2 {
            return Err(Error::contract("fitting needs at least two views"));
        }
        if index >= cams.len() {
            return Err(Error::contract(format!("target index {index} out of range for {} views", cams.len())));
        }
        for (i, (img, c)) in images.iter().zip(&cams).enumerate() {
            if img.shape() != [c.height, c.width, 3] {
                return Err(Error::dim(format!(
                    "image {i} has shape {:?} for a {}x{} camera",
                    img.shape(),
                    c.width,
                    c.height
                )));
            }
        }
        let target = Frustum::new(cams[index].clone(), near, far)?;
        Ok(Self {
            images,
            cams,
            target,
            target_index: index,
            reproject: true,
        })
    }

    fn views(&self) -> usize {
        self.cams.len()
    }

    fn without(&self, j: usize) -> Vec<bool> {
        (0..self.views()).map(|v| v != j).collect()
    }

    /// Renders view `j` from the other views: the held-out target render for the
    /// LDM's own view, a reprojection otherwise.
    fn render_view(&self, g: &mut Graph<T>, vars: LdmVars, imgs: &[Var], j: usize) -> Result<(Var, Tensor<T>)> {
        let en = self.without(j);
        if j == self.target_index {
            render_target_covered(g, &self.target, vars, imgs, &self.cams, Some(&en))
        } else {
            render_to_camera_graph(g, &self.target, vars, imgs, &self.cams, Some(&en), &self.cams[j])
        }
    }

    fn eval_views(&self) -> Vec<usize> {
        let mut v = vec![self.target_index];
        if self.reproject {
            v.extend((0..self.views()).filter(|&j| j != self.target_index));
        }
        v
    }
}

/// Weighted L1 over covered pixels. Returns the loss and the covered count.
fn covered_l1<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    cover: &Tensor<T>,
    weight: f64,
) -> Result<(Var, usize)> {
    let c = target.last_dim();
    let n = cover.data().iter().filter(|&&v| v > T::zero()).count();
    if n == 0 {
        return Err(Error::contract("no target pixel is seen by any enabled view"));
    }
    let mask = Tensor::from_fn(target.shape(), |i| cover.data()[i / c]);
    let t = g.constant(target.clone());
    let mv = g.constant(mask);
    let d = g.sub(pred, t)?;
    let d = g.mul(d, mv)?;
    let d = g.activation(Activation::Abs, d)?;
    let s = g.sum(d)?;
    Ok((g.scale(s, weight / (n * c) as f64)?, n))
}

fn fit_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Fit {
            step,
            message: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Fit {
            step,
            message: format!("loss is {loss}"),
        })
    }
}

/// Optimizes raw depth, density and blend logits of an `L`-layer LDM in the
/// problem's target frustum. All logits start at zero: depths at the band
/// anchors, densities 0.5, uniform blend. The loss averages the covered L1 of
/// every evaluation view.
pub fn fit_raw_ldm<T: Real>(problem: &FitProblem<T>, layers: usize, cfg: &FitConfig) -> Result<(Ldm<T>, FitReport)> {
    cfg.validate()?;
    if layers == 0 {
        return Err(Error::contract("an LDM needs at least one layer"));
    }
    if problem.views() < 2 {
        return Err(Error::contract("fitting needs at least two views"));
    }
    let cam = &problem.target.camera;
    let (h, w, m) = (cam.height, cam.width, problem.views());
    let mut store = ParamStore::<T>::new(cfg.seed);
    store.init_const(DEPTH_LOGITS, &[layers, h, w], 0.0)?;
    store.init_const(DENSITY_LOGITS, &[layers, h, w], 0.0)?;
    store.init_const(BLEND_LOGITS, &[layers, h, w, m], 0.0)?;
    let views = problem.eval_views();

    // loss, per-view (render, coverage) and the activated maps
    type Built<T> = (Option<Var>, Vec<(Var, Tensor<T>)>, LdmVars);
    let build = |g: &mut Graph<T>, store: &ParamStore<T>, with_loss: bool| -> Result<Built<T>> {
        let dl = g.param(store, DEPTH_LOGITS)?;
        let sl = g.param(store, DENSITY_LOGITS)?;
        let bl = g.param(store, BLEND_LOGITS)?;
        let vars = LdmVars {
            depth: g.depth_activation(dl, problem.target.near, problem.target.far)?,
            sigma: g.sigmoid(sl)?,
            beta: g.softmax(bl, 3)?,
        };
        let imgs: Vec<Var> = problem.images.iter().map(|i| g.constant(i.clone())).collect();
        let mut renders = Vec::with_capacity(views.len());
        let mut terms = Vec::with_capacity(views.len());
        for &j in &views {
            let (img, cover) = problem.render_view(g, vars, &imgs, j)?;
            if with_loss {
                let weight = cfg.l1_weight / views.len() as f64;
                terms.push(covered_l1(g, img, &problem.images[j], &cover, weight)?.0);
            }
            renders.push((img, cover));
        }
        let mut loss = None;
        for t in terms {
            loss = Some(match loss {
                None => t,
                Some(l) => g.add(l, t)?,
            });
        }
        Ok((loss, renders, vars))
    };

    let start = Instant::now();
    let mut adam = Adam::new(cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    let lr_of = |name: &str| match name {
        DEPTH_LOGITS => cfg.lr * cfg.depth_lr_scale,
        BLEND_LOGITS => cfg.lr * cfg.blend_lr_scale,
        _ => cfg.lr,
    };
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let (loss, _, _) = build(&mut g, &store, true).map_err(|e| fit_error(step, e))?;
        let loss = loss.expect("at least one evaluation view");
        let lv = g.value(loss).item().f64();
        check_loss(step, lv)?;
        losses.push(lv);
        let grads = g.backward(loss).map_err(|e| fit_error(step, e))?;
        adam.step(&mut store, &grads, lr_of)?;
    }

    let mut g = Graph::new();
    let (_, renders, vars) = build(&mut g, &store, false).map_err(|e| fit_error(cfg.steps, e))?;
    let ldm = Ldm::from_graph(&g, vars, &problem.target);
    let mut psnrs = Vec::with_capacity(views.len());
    for (&j, (img, cover)) in views.iter().zip(&renders) {
        psnrs.push((format!("view_{j:03}"), psnr_masked(g.value(*img), &problem.images[j], Some(cover))?));
    }
    let cover = &renders[0].1;
    let coverage = cover.data().iter().filter(|&&v| v > T::zero()).count() as f64 / cover.len() as f64;
    Ok((
        ldm,
        FitReport {
            losses,
            psnr: psnrs,
            coverage,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Default Adam learning rate for network training.
pub const TRAIN_LR: f64 = 1e-3;
/// Default rig baseline of the synthetic training scene.
pub const TRAIN_BASELINE: f64 = 0.3;

/// Source views plus a held-out target for network training.
#[derive(Debug, Clone)]
pub struct TrainScene<T> {
    pub images: Vec<Tensor<T>>,
    pub cams: Vec<Camera>,
    pub target: Frustum,
    pub target_image: Tensor<T>,
}

impl<T: Real> TrainScene<T> {
    /// Two-plane scene seen by a planar rig with the given baseline, with the
    /// target at the rig center.
    pub fn synthetic(seed: u64, baseline: f64, cfg: &ModelConfig) -> Result<Self> {
        let [h, w] = cfg.image;
        let [oh, ow] = cfg.output;
        let rig = RigSpec {
            views: cfg.views,
            width: w,
            height: h,
            focal: w as f64,
            near: cfg.near,
            far: cfg.far,
            baseline,
        };
        let reference = rig.reference()?;
        let scene = make_scene(seed, 2, &reference)?;
        let cams = rig.cameras()?;
        let images = cams.iter().map(|c| oracle_render(&scene, c).0.cast()).collect();
        let target = Frustum::new(reference.camera.resized(ow, oh), cfg.near, cfg.far)?;
        let target_image = oracle_render(&scene, &target.camera).0.cast();
        Ok(Self {
            images,
            cams,
            target,
            target_image,
        })
    }
}

/// Trains all network parameters on one scene with Adam on `l1_weight * L1`.
pub fn train_nano<T: Real>(
    scene: &TrainScene<T>,
    model: &ModelConfig,
    cfg: &FitConfig,
) -> Result<(ParamStore<T>, FitReport)> {
    cfg.validate()?;
    model.validate()?;
    let mut store = network::init_params::<T>(model, cfg.seed)?;
    let start = Instant::now();
    let mut adam = Adam::new(cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    let ones = Tensor::ones(&scene.target_image.shape()[..2]);
    let run = |store: &ParamStore<T>| -> Result<(Graph<T>, Var)> {
        let (g, _, img) = network::predict(store, model, &scene.images, &scene.cams, &scene.target)?;
        Ok((g, img))
    };
    for step in 0..cfg.steps {
        let (mut g, img) = run(&store).map_err(|e| fit_error(step, e))?;
        let (loss, _) =
            covered_l1(&mut g, img, &scene.target_image, &ones, cfg.l1_weight).map_err(|e| fit_error(step, e))?;
        let lv = g.value(loss).item().f64();
        check_loss(step, lv)?;
        losses.push(lv);
        let grads = g.backward(loss).map_err(|e| fit_error(step, e))?;
        adam.step(&mut store, &grads, |_| cfg.lr)?;
    }
    let (g, img) = run(&store).map_err(|e| fit_error(cfg.steps, e))?;
    let p = psnr(g.value(img), &scene.target_image)?;
    Ok((
        store,
        FitReport {
            losses,
            psnr: vec![("target".to_string(), p)],
            coverage: 1.0,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests;
