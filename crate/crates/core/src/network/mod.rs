//! The multi-view network: encoder pyramid, learned initialization, Update & Fuse
//! steps and the final upsample-and-activate.

pub mod blocks;
pub mod config;
pub mod encoder;

use crate::attention::{fusion_block, init_fusion_attention, init_fusion_conv};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Frustum};
use crate::ldm::{
    activate_density, activate_depth, depth_from_tanh, head_logits, render_intermediate,
    render_target_graph, upsample_activate, DecodeHeads, LdmVars,
};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub use blocks::{decode_blend_logits, deltas_for_attention, layer_collapse, update_features};
pub use config::{parse_blocks, Ablation, Block, FusionSpec, ModelConfig, StepConfig, StepPlan, StepShape};
pub use encoder::{encode_inputs, Pyramid};

pub const INIT_FEATURE: &str = "init.c0";
pub const RGB_HEAD: &str = "heads.rgb";

/// Creates every parameter of the model described by `cfg`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let plans = {
        cfg.validate()?;
        cfg.plans()?
    };
    let c = cfg.channels;
    let mut store = ParamStore::new(seed);
    encoder::init_encoder(&mut store, cfg)?;
    store.init_uniform_bound(INIT_FEATURE, &[c], 1.0)?;
    for (n, plan) in plans.iter().enumerate() {
        for i in 0..plan.collapses {
            blocks::init_collapse(&mut store, &format!("s{n}.collapse{i}"), c)?;
        }
        // rendered appearance (C) and alpha are only present after initialization
        let cin = if plan.initialize { 2 * c } else { 3 * c + 1 };
        blocks::init_update(&mut store, &format!("s{n}.update"), cin, c, cfg.update_blocks)?;
        for (b, f) in plan.fusion.iter().enumerate() {
            init_fusion_attention(&mut store, &format!("s{n}.fuse{b}.attn"), c, f.heads)?;
            for j in 0..f.convs {
                init_fusion_conv(&mut store, &format!("s{n}.fuse{b}.conv{j}"), c)?;
            }
        }
    }
    DecodeHeads::init(&mut store, c, c)?;
    store.init_uniform(RGB_HEAD, &[c, 3], c)?;
    blocks::init_blend(&mut store, c)?;
    Ok(store)
}

/// Feature volume and the update features it was last fused with.
#[derive(Debug, Clone, Copy)]
pub struct StepState {
    /// `[L, h, w, C]`
    pub v: Var,
    /// `[L h w, M, C]`
    pub deltas: Var,
}

/// Network outputs at the final LDM resolution.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    pub ldm: LdmVars,
    /// `[L, h, w, M]` before upsampling.
    pub blend_logits: Var,
    /// `[L, H, W, 3]` when decoding colour directly.
    pub rgb: Option<Var>,
    pub volume: Var,
}

fn level_cams(cams: &[Camera], (h, w): (usize, usize)) -> Vec<Camera> {
    cams.iter().map(|c| c.resized(w, h)).collect()
}

fn run_fusion<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    n: usize,
    plan: &StepPlan,
    mut v: Var,
    deltas: Var,
) -> Result<Var> {
    for (b, f) in plan.fusion.iter().enumerate() {
        v = fusion_block(
            g,
            store,
            &format!("s{n}.fuse{b}"),
            v,
            deltas,
            f.heads,
            f.convs,
            cfg.ablation.zero_keys,
        )?;
    }
    Ok(v)
}

/// Initialize step: broadcast the learned feature, back-project image features
/// and ray encodings at the anchor depths, then fuse.
pub fn initialize<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyramid: &Pyramid,
    cams: &[Camera],
    target: &Frustum,
) -> Result<StepState> {
    let plan = cfg.plans()?.remove(0);
    let s = &cfg.steps[0];
    let (l, h, w) = (s.layers, s.height, s.width);
    let c0 = g.param(store, INIT_FEATURE)?;
    let v = g.broadcast(c0, &[l, h, w])?;
    let flat = Tensor::from_fn(&[l, h, w], |i| {
        T::c(depth_from_tanh(i / (h * w), l, target.near, target.far, 0.0))
    });
    let depth = g.constant(flat);
    let points = g.layer_points(target, depth)?;
    let x = g.concat(&[pyramid.features(s.level), pyramid.rays(s.level)], 3)?;
    let kcams = level_cams(cams, cfg.level_size(s.level));
    let d = update_features(g, store, "s0.update", cfg.update_blocks, x, &kcams, points)?;
    let deltas = deltas_for_attention(g, d)?;
    let v = run_fusion(g, store, cfg, 0, &plan, v, deltas)?;
    Ok(StepState { v, deltas })
}

/// One Update & Fuse step `n >= 1`.
pub fn update_and_fuse<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    n: usize,
    state: StepState,
    pyramid: &Pyramid,
    cams: &[Camera],
    target: &Frustum,
) -> Result<StepState> {
    let plan = cfg.steps[n]
        .plan()
        .map_err(|m| Error::schema(format!("steps[{n}].blocks"), m))?;
    let (step, prev) = (&cfg.steps[n], &cfg.steps[n - 1]);
    let mut v = state.v;
    for i in 0..plan.collapses {
        v = layer_collapse(g, store, &format!("s{n}.collapse{i}"), v)?;
    }
    let w_d = g.param(store, DecodeHeads::DEPTH)?;
    let depth = activate_depth(g, v, w_d, target)?;
    let points = g.layer_points(target, depth)?;
    let (kh, kw) = cfg.level_size(step.level);
    let m = cams.len();
    let rendered = if cfg.ablation.zero_rendered {
        g.constant(Tensor::zeros(&[m, kh, kw, cfg.channels + 1]))
    } else {
        // render at the previous step's feature resolution, then resample
        let w_s = g.param(store, DecodeHeads::SIGMA)?;
        let w_a = g.param(store, DecodeHeads::APPEARANCE)?;
        let sigma = activate_density(g, v, w_s)?;
        let a = g.matmul(v, w_a)?;
        let a = g.sigmoid(a)?;
        let pcams = level_cams(cams, cfg.level_size(prev.level));
        let mut parts = Vec::with_capacity(m);
        for cam in &pcams {
            let r = render_intermediate(g, a, sigma, points, cam)?;
            let r = g.bilinear(r, kh, kw)?;
            let sh = g.shape(r).to_vec();
            parts.push(g.reshape(r, &[1, sh[0], sh[1], sh[2]])?);
        }
        g.concat(&parts, 0)?
    };
    let (h, w) = (step.height, step.width);
    let (v, points) = if g.shape(v)[1..3] != [h, w] {
        let up = g.bilinear(v, h, w)?;
        let d = activate_depth(g, up, w_d, target)?;
        (up, g.layer_points(target, d)?)
    } else {
        (v, points)
    };
    let x = g.concat(&[rendered, pyramid.features(step.level), pyramid.rays(step.level)], 3)?;
    let kcams = level_cams(cams, (kh, kw));
    let d = update_features(g, store, &format!("s{n}.update"), cfg.update_blocks, x, &kcams, points)?;
    let deltas = deltas_for_attention(g, d)?;
    let v = run_fusion(g, store, cfg, n, &plan, v, deltas)?;
    Ok(StepState { v, deltas })
}

fn stack_views<T: Real>(g: &mut Graph<T>, images: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(images.len());
    for &img in images {
        let s = g.shape(img).to_vec();
        let mut shape = vec![1];
        shape.extend_from_slice(&s);
        parts.push(g.reshape(img, &shape)?);
    }
    g.concat(&parts, 0)
}

/// Full forward pass from input images `[H, W, 3]` (one per camera) to an LDM in `target`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    images: &[Var],
    cams: &[Camera],
    target: &Frustum,
) -> Result<NetworkOutput> {
    cfg.validate()?;
    if images.is_empty() || images.len() != cams.len() {
        return Err(Error::contract(format!(
            "forward: {} images for {} cameras",
            images.len(),
            cams.len()
        )));
    }
    let batch = stack_views(g, images)?;
    let pyramid = encode_inputs(g, store, cfg, batch, cams, target)?;
    let mut state = initialize(g, store, cfg, &pyramid, cams, target)?;
    for n in 1..cfg.steps.len() {
        state = update_and_fuse(g, store, cfg, n, state, &pyramid, cams, target)?;
    }
    let v = state.v;
    let blend_logits = decode_blend_logits(g, store, v, state.deltas)?;
    let w_d = g.param(store, DecodeHeads::DEPTH)?;
    let w_s = g.param(store, DecodeHeads::SIGMA)?;
    let dl = head_logits(g, v, w_d)?;
    let sl = head_logits(g, v, w_s)?;
    let ldm = upsample_activate(g, dl, sl, blend_logits, cfg.upsample, target)?;
    let rgb = if cfg.ablation.direct_rgb {
        let w = g.param(store, RGB_HEAD)?;
        let x = g.matmul(v, w)?;
        let [oh, ow] = cfg.output;
        let x = g.bilinear(x, oh, ow)?;
        Some(g.sigmoid(x)?)
    } else {
        None
    };
    Ok(NetworkOutput {
        ldm,
        blend_logits,
        rgb,
        volume: v,
    })
}

/// Renders the network output into the target view.
pub fn render_output<T: Real>(
    g: &mut Graph<T>,
    out: &NetworkOutput,
    images: &[Var],
    cams: &[Camera],
    target: &Frustum,
) -> Result<Var> {
    match out.rgb {
        Some(rgb) => g.over_composite(rgb, out.ldm.sigma),
        None => render_target_graph(g, target, out.ldm, images, cams, None),
    }
}

/// Forward plus target render; returns the graph, the output and the image var.
pub fn predict<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    images: &[Tensor<T>],
    cams: &[Camera],
    target: &Frustum,
) -> Result<(Graph<T>, NetworkOutput, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = images.iter().map(|i| g.constant(i.clone())).collect();
    let out = forward(&mut g, store, cfg, &vars, cams, target)?;
    let img = render_output(&mut g, &out, &vars, cams, target)?;
    Ok((g, out, img))
}

/// Counted operations of a forward plus target render, split as `T_V + M * T_image`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCountReport {
    /// `(M, count)` samples.
    pub samples: Vec<(usize, u64)>,
    pub volume_term: i128,
    pub per_image: i128,
    /// Largest absolute residual of the affine fit over all samples.
    pub max_residual: i128,
}

impl OpCountReport {
    pub fn is_exact(&self) -> bool {
        self.max_residual == 0
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("views,ops,affine_fit\n");
        for &(m, c) in &self.samples {
            s += &format!("{m},{c},{}\n", self.volume_term + m as i128 * self.per_image);
        }
        s += &format!(
            "# T_V = {}, T_image = {}, max residual = {}\n",
            self.volume_term, self.per_image, self.max_residual
        );
        s
    }
}

/// Synthetic rig used only for counting: `m` cameras on a small horizontal line.
fn counting_rig(cfg: &ModelConfig, m: usize) -> (Vec<Camera>, Frustum) {
    let [h, w] = cfg.image;
    let f = w as f64;
    let cams = (0..m)
        .map(|i| {
            let x = 0.05 * (i as f64 - (m as f64 - 1.0) / 2.0);
            Camera::axis_aligned(nalgebra::Vector3::new(x, 0.0, 0.0), f, w, h)
        })
        .collect();
    let [oh, ow] = cfg.output;
    let tcam = Camera::axis_aligned(nalgebra::Vector3::zeros(), f * ow as f64 / w as f64, ow, oh);
    (cams, Frustum::new(tcam, cfg.near, cfg.far).expect("valid counting frustum"))
}

/// Counts operations at each view count and fits the affine model through the
/// first two samples, reporting the residual on all of them.
pub fn op_count_decomposition(cfg: &ModelConfig, seed: u64, views: &[usize]) -> Result<OpCountReport> {
    if views.len() < 2 {
        return Err(Error::contract("op count decomposition needs at least two view counts"));
    }
    let store = init_params::<f32>(cfg, seed)?;
    let mut samples = Vec::with_capacity(views.len());
    for &m in views {
        let (cams, target) = counting_rig(cfg, m);
        let imgs: Vec<Tensor<f32>> = (0..m)
            .map(|i| Tensor::full(&[cfg.image[0], cfg.image[1], 3], 0.25 + 0.1 * i as f32))
            .collect();
        let (g, _, _) = predict(&store, cfg, &imgs, &cams, &target)?;
        samples.push((m, g.op_count()));
    }
    let (m0, c0) = (samples[0].0 as i128, samples[0].1 as i128);
    let (m1, c1) = (samples[1].0 as i128, samples[1].1 as i128);
    if m0 == m1 {
        return Err(Error::contract("view counts must differ"));
    }
    let per_image = (c1 - c0) / (m1 - m0);
    let volume_term = c0 - m0 * per_image;
    let max_residual = samples
        .iter()
        .map(|&(m, c)| (c as i128 - volume_term - m as i128 * per_image).abs())
        .max()
        .unwrap_or(0);
    Ok(OpCountReport {
        samples,
        volume_term,
        per_image,
        max_residual,
    })
}

/// Gradient checks for the network pieces, in f64.
pub(crate) fn gradcheck_cases(max_elems: usize) -> Result<Vec<crate::gradcheck::CheckResult>> {
    use crate::gradcheck::{check_inputs, check_params};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new(6);
    blocks::init_collapse(&mut store, "lc", 4)?;
    store.insert("lc.b1", Tensor::rand_uniform(&[4], -0.3, 0.3, &mut rng));
    let names: Vec<String> = store.names().map(String::from).collect();
    let vt = Tensor::rand_uniform(&[4, 2, 2, 4], -1.0, 1.0, &mut rng);
    let s2 = store.clone();
    out.push(check_inputs("layer_collapse", std::slice::from_ref(&vt), max_elems, move |g, x| {
        layer_collapse(g, &s2, "lc", x[0])
    })?);
    out.push(check_params("layer_collapse_params", &store, &names, max_elems, |g, s| {
        let v = g.constant(vt.clone());
        layer_collapse(g, s, "lc", v)
    })?);

    let cfg = ModelConfig::nano();
    let (cams, target) = counting_rig(&cfg, 2);
    let imgs: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::rand_uniform(&[cfg.image[0], cfg.image[1], 3], 0.0, 1.0, &mut rng))
        .collect();
    let store = init_params::<f64>(&cfg, 6)?;
    let (c2, t2, i2) = (cams.clone(), target.clone(), imgs.clone());
    out.push(check_params(
        "initialize_c0",
        &store,
        &[INIT_FEATURE.to_string()],
        max_elems,
        move |g, s| {
            let vars: Vec<Var> = i2.iter().map(|i| g.constant(i.clone())).collect();
            let batch = stack_views(g, &vars)?;
            let p = encode_inputs(g, s, &cfg, batch, &c2, &t2)?;
            Ok(initialize(g, s, &cfg, &p, &c2, &t2)?.v)
        },
    )?);
    // one element from each parameter tensor keeps the full forward check fast
    let cfg = ModelConfig::nano();
    let names: Vec<String> = store.names().map(String::from).collect();
    out.push(check_params("nano_forward_render", &store, &names, 1, move |g, s| {
        let vars: Vec<Var> = imgs.iter().map(|i| g.constant(i.clone())).collect();
        let o = forward(g, s, &cfg, &vars, &cams, &target)?;
        render_output(g, &o, &vars, &cams, &target)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests;
