//! Update block, layer collapse and blend-logit decoding.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::ldm::gather_views;
use crate::params::ParamStore;
use crate::tensor::Real;

use super::encoder::{init_residual, residual_block};

pub(crate) fn init_collapse<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.init_uniform(&format!("{prefix}.w1"), &[2 * c, c], 2 * c)?;
    store.init_const(&format!("{prefix}.b1"), &[c], 0.0)?;
    store.init_uniform(&format!("{prefix}.w2"), &[c, c], c)?;
    store.init_const(&format!("{prefix}.b2"), &[c], 0.0)
}

/// Halves the layer count: mean of each adjacent pair plus a per-texel MLP of their concatenation.
pub fn layer_collapse<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("layer_collapse: expected [L, H, W, C], got {s:?}")));
    }
    let (l, h, w, c) = (s[0], s[1], s[2], s[3]);
    if l % 2 != 0 {
        return Err(Error::contract(format!("layer_collapse: odd layer count {l}")));
    }
    let pairs = g.reshape(v, &[l / 2, 2, h, w, c])?;
    let a = g.narrow(pairs, 1, 0, 1)?;
    let a = g.reshape(a, &[l / 2, h, w, c])?;
    let b = g.narrow(pairs, 1, 1, 1)?;
    let b = g.reshape(b, &[l / 2, h, w, c])?;
    let sum = g.add(a, b)?;
    let mean = g.scale(sum, 0.5)?;
    let cat = g.concat(&[a, b], 3)?;
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let x = g.matmul(cat, w1)?;
    let x = g.add_bias(x, b1)?;
    let x = g.gelu(x)?;
    let x = g.matmul(x, w2)?;
    let x = g.add_bias(x, b2)?;
    g.add(mean, x)
}

pub(crate) fn init_update<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_channels: usize,
    c: usize,
    blocks: usize,
) -> Result<()> {
    store.init_uniform(&format!("{prefix}.stem.k"), &[3, 3, in_channels, c], 9 * in_channels)?;
    store.init_const(&format!("{prefix}.stem.b"), &[c], 0.0)?;
    for j in 0..blocks {
        init_residual(store, &format!("{prefix}.r{j}"), c)?;
    }
    Ok(())
}

/// Runs the small per-view CNN on `x[M, h, w, Cin]` and back-projects its output
/// onto `points`, giving `[M, L, H, W, C]`. `cams` are at the feature resolution.
pub fn update_features<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    blocks: usize,
    x: Var,
    cams: &[Camera],
    points: Var,
) -> Result<Var> {
    let k = g.param(store, &format!("{prefix}.stem.k"))?;
    let b = g.param(store, &format!("{prefix}.stem.b"))?;
    let mut y = g.conv3x3(x, k, b)?;
    for j in 0..blocks {
        y = residual_block(g, store, &format!("{prefix}.r{j}"), y)?;
    }
    let s = g.shape(y).to_vec();
    let mut views = Vec::with_capacity(s[0]);
    for m in 0..s[0] {
        let one = g.narrow(y, 0, m, 1)?;
        views.push(g.reshape(one, &s[1..])?);
    }
    Ok(gather_views(g, &views, cams, points)?.0)
}

/// `[M, L, H, W, C]` to the attention layout `[L H W, M, C]`.
pub fn deltas_for_attention<T: Real>(g: &mut Graph<T>, deltas: Var) -> Result<Var> {
    let s = g.shape(deltas).to_vec();
    let texels = s[1] * s[2] * s[3];
    let d = g.reshape(deltas, &[s[0], texels, s[4]])?;
    g.permute(d, &[1, 0, 2])
}

pub const BLEND_NORM: &str = "blend.norm";
pub const BLEND_W: &str = "blend.w";

pub(crate) fn init_blend<T: Real>(store: &mut ParamStore<T>, c: usize) -> Result<()> {
    store.init_const(BLEND_NORM, &[c], 1.0)?;
    store.init_uniform(BLEND_W, &[c, c], c)
}

/// Single-head attention scores of `rms_norm(V) W` against each view's update
/// features: `V[L, H, W, C]`, `deltas[L H W, M, C]` to logits `[L, H, W, M]`.
pub fn decode_blend_logits<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, v: Var, deltas: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let c = s[3];
    let texels = s[0] * s[1] * s[2];
    let m = g.shape(deltas)[1];
    let gain = g.param(store, BLEND_NORM)?;
    let w = g.param(store, BLEND_W)?;
    let n = g.rms_norm(v, gain)?;
    let q = g.reshape(n, &[texels, c])?;
    let q = g.matmul(q, w)?;
    let q = g.reshape(q, &[texels, 1, c])?;
    let logits = g.attention_scores(q, deltas, 1.0 / (c as f64).sqrt())?;
    g.reshape(logits, &[s[0], s[1], s[2], m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn collapse_store(c: usize, zero: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new(4);
        init_collapse(&mut s, "lc", c).unwrap();
        if zero {
            s.insert("lc.w2", Tensor::zeros(&[c, c]));
        }
        s
    }

    #[test]
    fn zero_mlp_collapse_is_pairwise_mean() {
        let store = collapse_store(3, true);
        let vt = Tensor::<f64>::from_fn(&[4, 2, 2, 3], |i| (i as f64 * 0.41).sin());
        let mut g = Graph::new();
        let v = g.input(vt.clone());
        let out = layer_collapse(&mut g, &store, "lc", v).unwrap();
        let o = g.value(out);
        assert_eq!(o.shape(), &[2, 2, 2, 3]);
        for j in 0..2 {
            for i in 0..12 {
                let want = 0.5 * (vt.data()[(2 * j) * 12 + i] + vt.data()[(2 * j + 1) * 12 + i]);
                assert!((o.data()[j * 12 + i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_layers_survive_collapse() {
        let store = collapse_store(2, true);
        let layer = Tensor::<f64>::from_fn(&[1, 3, 3, 2], |i| i as f64 * 0.1);
        let vt = Tensor::stack(&[layer.index0(0), layer.index0(0)]).unwrap();
        let mut g = Graph::new();
        let v = g.input(vt);
        let out = layer_collapse(&mut g, &store, "lc", v).unwrap();
        assert_eq!(g.value(out), &layer);
    }

    #[test]
    fn odd_layers_rejected() {
        let store = collapse_store(2, false);
        let mut g = Graph::new();
        let v = g.input(Tensor::<f64>::zeros(&[3, 1, 1, 2]));
        assert!(matches!(layer_collapse(&mut g, &store, "lc", v), Err(Error::Contract(_))));
    }

    fn blend_store(c: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new(9);
        init_blend(&mut s, c).unwrap();
        s
    }

    fn softmax(row: &[f64]) -> Vec<f64> {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn equal_deltas_give_uniform_blend() {
        let c = 4;
        let store = blend_store(c);
        let mut g = Graph::new();
        let v = g.input(Tensor::<f64>::from_fn(&[1, 2, 2, c], |i| (i as f64).cos()));
        let row = Tensor::<f64>::from_fn(&[4, 1, c], |i| (i as f64 * 0.3).sin());
        let d = Tensor::from_fn(&[4, 3, c], |i| row.data()[(i / (3 * c)) * c + i % c]);
        let d = g.input(d);
        let out = decode_blend_logits(&mut g, &store, v, d).unwrap();
        for px in g.value(out).data().chunks(3) {
            for b in softmax(px) {
                assert!((b - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_delta_wins_the_blend() {
        let c = 4;
        let store = blend_store(c);
        let vt = Tensor::<f64>::from_f64(&[1, 1, 1, c], &[0.3, -1.2, 0.8, 0.5]).unwrap();
        // the query direction rms_norm(V) W, computed independently
        let rms = (vt.data().iter().map(|x| x * x).sum::<f64>() / c as f64 + 1e-6).sqrt();
        let w = store.get(BLEND_W).unwrap();
        let q: Vec<f64> = (0..c)
            .map(|j| (0..c).map(|i| vt.data()[i] / rms * w.data()[i * c + j]).sum())
            .collect();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = 10.0 * (c as f64).sqrt() / qn;
        // view 0 along q, view 1 orthogonal to it, view 2 zero
        let mut ortho = vec![q[1], -q[0], 0.0, 0.0];
        let on = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
        ortho.iter_mut().for_each(|x| *x /= on);
        let mut d = Vec::new();
        d.extend(q.iter().map(|x| x * scale / qn));
        d.extend(ortho);
        d.extend(vec![0.0; c]);
        let mut g = Graph::new();
        let v = g.input(vt);
        let d = g.input(Tensor::from_f64(&[1, 3, c], &d).unwrap());
        let out = decode_blend_logits(&mut g, &store, v, d).unwrap();
        let beta = softmax(g.value(out).data());
        assert!(beta[0] > 0.9, "{beta:?}");
    }
}
