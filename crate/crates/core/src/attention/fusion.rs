//! Fusion block: residual one-to-many attention over per-view update features,
//! followed by residual 3x3 conv MLPs, both pre-normalized.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

use super::otm::one_to_many_graph;

pub fn init_fusion_attention<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, heads: usize) -> Result<()> {
    store.init_const(&format!("{prefix}.norm"), &[channels], 1.0)?;
    store.init_uniform(&format!("{prefix}.wq"), &[channels, heads * channels], channels)?;
    store.init_uniform(&format!("{prefix}.wo"), &[heads * channels, channels], heads * channels)?;
    store.init_const(&format!("{prefix}.bo"), &[channels], 0.0)
}

pub fn init_fusion_conv<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<()> {
    store.init_const(&format!("{prefix}.norm"), &[channels], 1.0)?;
    store.init_uniform(&format!("{prefix}.k1"), &[3, 3, channels, channels], 9 * channels)?;
    store.init_const(&format!("{prefix}.b1"), &[channels], 0.0)?;
    store.init_uniform(&format!("{prefix}.k2"), &[3, 3, channels, channels], 9 * channels)?;
    store.init_const(&format!("{prefix}.b2"), &[channels], 0.0)
}

/// `V + OTM(rms_norm(V), deltas) + b_O` with `V[L, H, W, C]` and `deltas[L H W, M, C]`.
pub fn fusion_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    v: Var,
    deltas: Var,
    heads: usize,
    zero_keys: bool,
) -> Result<Var> {
    let vs = g.shape(v).to_vec();
    let c = *vs.last().unwrap_or(&0);
    let texels: usize = vs[..vs.len() - 1].iter().product();
    let ds = g.shape(deltas);
    if ds.len() != 3 || ds[0] != texels || ds[2] != c {
        return Err(Error::dim(format!(
            "fusion_block: volume {vs:?} vs deltas {ds:?}"
        )));
    }
    let gain = g.param(store, &format!("{prefix}.norm"))?;
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let bo = g.param(store, &format!("{prefix}.bo"))?;
    let n = g.rms_norm(v, gain)?;
    let q = g.reshape(n, &[texels, c])?;
    let a = one_to_many_graph(g, q, deltas, wq, wo, heads, zero_keys)?;
    let a = g.add_bias(a, bo)?;
    let a = g.reshape(a, &vs)?;
    g.add(v, a)
}

/// `V + conv(gelu(conv(rms_norm(V))))`, convolving each layer slice independently.
pub fn fusion_conv<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, v: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.norm"))?;
    let k1 = g.param(store, &format!("{prefix}.k1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let k2 = g.param(store, &format!("{prefix}.k2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let n = g.rms_norm(v, gain)?;
    let h = g.conv3x3(n, k1, b1)?;
    let h = g.gelu(h)?;
    let h = g.conv3x3(h, k2, b2)?;
    g.add(v, h)
}

/// Attention followed by `convs` conv MLPs, parameters under `prefix.attn` and `prefix.conv{j}`.
#[allow(clippy::too_many_arguments)]
pub fn fusion_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    v: Var,
    deltas: Var,
    heads: usize,
    convs: usize,
    zero_keys: bool,
) -> Result<Var> {
    let mut v = fusion_attention(g, store, &format!("{prefix}.attn"), v, deltas, heads, zero_keys)?;
    for j in 0..convs {
        v = fusion_conv(g, store, &format!("{prefix}.conv{j}"), v)?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zeroed_outputs_leave_volume_unchanged() {
        let (c, h) = (8, 2);
        let mut store = ParamStore::<f64>::new(1);
        init_fusion_attention(&mut store, "f.attn", c, h).unwrap();
        init_fusion_conv(&mut store, "f.conv0", c).unwrap();
        store.insert("f.attn.wo", Tensor::zeros(&[h * c, c]));
        store.insert("f.conv0.k2", Tensor::zeros(&[3, 3, c, c]));
        let mut g = Graph::new();
        let vt = Tensor::from_fn(&[2, 3, 3, c], |i| (i as f64 * 0.37).sin());
        let v = g.input(vt.clone());
        let d = g.input(Tensor::from_fn(&[18, 3, c], |i| (i as f64 * 0.11).cos()));
        let out = fusion_block(&mut g, &store, "f", v, d, h, 1, false).unwrap();
        assert_eq!(g.value(out), &vt);
    }

    #[test]
    fn mismatched_deltas_rejected() {
        let mut store = ParamStore::<f64>::new(1);
        init_fusion_attention(&mut store, "a", 4, 1).unwrap();
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(&[1, 2, 2, 4]));
        let d = g.input(Tensor::zeros(&[3, 2, 4]));
        assert!(fusion_attention(&mut g, &store, "a", v, d, 1, false).is_err());
    }
}
