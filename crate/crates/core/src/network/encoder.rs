//! Shared-weight image encoder and per-level ray encodings.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{ray_encoding, Camera, Frustum, RayEncodingParams};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;

/// Per-level encoder outputs, batched over views: level `k` (1-based) is at index `k - 1`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// `[M, h_k, w_k, C]`
    pub features: Vec<Var>,
    /// Projected ray encodings `[M, h_k, w_k, C]`.
    pub rays: Vec<Var>,
}

impl Pyramid {
    pub fn features(&self, level: usize) -> Var {
        self.features[level - 1]
    }

    pub fn rays(&self, level: usize) -> Var {
        self.rays[level - 1]
    }
}

pub(crate) fn init_residual<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.init_uniform(&format!("{prefix}.k1"), &[3, 3, c, c], 9 * c)?;
    store.init_const(&format!("{prefix}.b1"), &[c], 0.0)?;
    store.init_uniform(&format!("{prefix}.k2"), &[3, 3, c, c], 9 * c)?;
    store.init_const(&format!("{prefix}.b2"), &[c], 0.0)
}

/// `x + conv(gelu(conv(x)))`
pub(crate) fn residual_block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let k1 = g.param(store, &format!("{prefix}.k1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let k2 = g.param(store, &format!("{prefix}.k2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = g.conv3x3(x, k1, b1)?;
    let h = g.gelu(h)?;
    let h = g.conv3x3(h, k2, b2)?;
    g.add(x, h)
}

pub(crate) fn init_encoder<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    store.init_uniform("enc.stem.k", &[3, 3, 3, c], 27)?;
    store.init_const("enc.stem.b", &[c], 0.0)?;
    for k in 1..=cfg.levels {
        for j in 0..cfg.encoder_blocks {
            init_residual(store, &format!("enc.l{k}.r{j}"), c)?;
        }
        store.init_uniform(&format!("ray.l{k}"), &[cfg.ray_dim(), c], cfg.ray_dim())?;
    }
    Ok(())
}

/// Encodes `images[M, H, W, 3]` into a feature pyramid plus ray encodings relative to `target`.
pub fn encode_inputs<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    images: Var,
    cams: &[Camera],
    target: &Frustum,
) -> Result<Pyramid> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[3] != 3 || [s[1], s[2]] != cfg.image || s[0] != cams.len() {
        return Err(Error::contract(format!(
            "encoder expects [{}, {}, {}, 3] images, got {s:?}",
            cams.len(),
            cfg.image[0],
            cfg.image[1]
        )));
    }
    let m = s[0];
    let k = g.param(store, "enc.stem.k")?;
    let b = g.param(store, "enc.stem.b")?;
    let mut x = g.conv3x3(images, k, b)?;
    let mut features = Vec::with_capacity(cfg.levels);
    for level in 1..=cfg.levels {
        for j in 0..cfg.encoder_blocks {
            x = residual_block(g, store, &format!("enc.l{level}.r{j}"), x)?;
        }
        x = g.mean_pool2(x)?;
        features.push(x);
    }
    // raw encodings once at the coarsest level, resampled per level
    let (hc, wc) = cfg.level_size(cfg.levels);
    let params = RayEncodingParams {
        octaves: cfg.ray_octaves,
    };
    let raw: Vec<Tensor<T>> = cams
        .iter()
        .map(|cam| ray_encoding(cam, target, hc, wc, &params))
        .collect();
    let raw = g.constant(Tensor::stack(&raw)?);
    let mut rays = Vec::with_capacity(cfg.levels);
    for level in 1..=cfg.levels {
        let (h, w) = cfg.level_size(level);
        if cfg.ablation.zero_ray_encoding {
            rays.push(g.constant(Tensor::zeros(&[m, h, w, cfg.channels])));
            continue;
        }
        let up = g.bilinear(raw, h, w)?;
        let wr = g.param(store, &format!("ray.l{level}"))?;
        rays.push(g.matmul(up, wr)?);
    }
    Ok(Pyramid { features, rays })
}
