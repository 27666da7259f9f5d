use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, check_params, CheckResult};
use crate::attention::{fusion_block, init_fusion_attention, init_fusion_conv, one_to_many_graph};
use crate::error::Result;
use crate::geometry::{Camera, Frustum, SPLAT_EPS};
use crate::ldm::{render_intermediate, render_target_graph, upsample_activate, LdmVars};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAX_ELEMS: usize = 24;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, r)
}

pub(super) fn core() -> Result<Vec<CheckResult>> {
    let r = &mut rng(1);
    let mut out = Vec::new();
    out.push(check_inputs(
        "matmul",
        &[rand(&[2, 3, 4], -1.0, 1.0, r), rand(&[4, 5], -1.0, 1.0, r)],
        MAX_ELEMS,
        |g, x| g.matmul(x[0], x[1]),
    )?);
    out.push(check_inputs(
        "add_bias",
        &[rand(&[3, 4], -1.0, 1.0, r), rand(&[4], -1.0, 1.0, r)],
        MAX_ELEMS,
        |g, x| g.add_bias(x[0], x[1]),
    )?);
    for (name, k) in [("sigmoid", 0), ("tanh", 1), ("gelu", 2)] {
        out.push(check_inputs(name, &[rand(&[4, 5], -3.0, 3.0, r)], MAX_ELEMS, move |g, x| match k {
            0 => g.sigmoid(x[0]),
            1 => g.tanh(x[0]),
            _ => g.gelu(x[0]),
        })?);
    }
    out.push(check_inputs("softmax", &[rand(&[3, 4, 2], -2.0, 2.0, r)], MAX_ELEMS, |g, x| {
        g.softmax(x[0], 1)
    })?);
    out.push(check_inputs(
        "conv2d_3x3",
        &[
            rand(&[2, 4, 5, 3], -1.0, 1.0, r),
            rand(&[3, 3, 3, 2], -1.0, 1.0, r),
            rand(&[2], -1.0, 1.0, r),
        ],
        MAX_ELEMS,
        |g, x| g.conv3x3(x[0], x[1], x[2]),
    )?);
    out.push(check_inputs(
        "rms_norm",
        &[rand(&[5, 6], -2.0, 2.0, r), rand(&[6], 0.5, 1.5, r)],
        MAX_ELEMS,
        |g, x| g.rms_norm(x[0], x[1]),
    )?);
    out.push(check_inputs("mean_pool_down2", &[rand(&[4, 6, 2], -1.0, 1.0, r)], MAX_ELEMS, |g, x| {
        g.mean_pool2(x[0])
    })?);
    out.push(check_inputs("bilinear_up", &[rand(&[2, 3, 5, 2], -1.0, 1.0, r)], MAX_ELEMS, |g, x| {
        g.bilinear(x[0], 7, 8)
    })?);
    out.push(check_inputs("bilinear_down", &[rand(&[6, 6, 2], -1.0, 1.0, r)], MAX_ELEMS, |g, x| {
        g.bilinear(x[0], 4, 5)
    })?);
    out.push(check_inputs(
        "shape_ops",
        &[rand(&[2, 3, 4], -1.0, 1.0, r), rand(&[3, 2], -1.0, 1.0, r)],
        MAX_ELEMS,
        |g, x| {
            let p = g.permute(x[0], &[1, 0, 2])?;
            let a = g.narrow(p, 2, 1, 2)?;
            let b = g.broadcast(x[1], &[2])?;
            let b = g.permute(b, &[1, 0, 2])?;
            let c = g.concat(&[a, b], 2)?;
            g.reshape(c, &[24])
        },
    )?);
    Ok(out)
}

fn target() -> Frustum {
    Frustum::new(Camera::axis_aligned(Vector3::zeros(), 16.0, 16, 16), 1.0, 6.0).unwrap()
}

fn side_camera() -> Camera {
    // wider field of view so every layer texel stays inside the image
    Camera::axis_aligned(Vector3::new(0.15, -0.1, 0.05), 9.0, 14, 12)
}

pub(super) fn geometry() -> Result<Vec<CheckResult>> {
    let r = &mut rng(2);
    let f = target();
    let cam = side_camera();
    let mut out = Vec::new();
    out.push(check_inputs("layer_world_points", &[rand(&[2, 3, 3], 1.5, 4.0, r)], MAX_ELEMS, |g, x| {
        g.layer_points(&target(), x[0])
    })?);
    let (f1, c1) = (f.clone(), cam.clone());
    out.push(check_inputs(
        "gather_backproject",
        &[rand(&[12, 14, 3], 0.0, 1.0, r), rand(&[2, 4, 4], 1.5, 4.0, r)],
        MAX_ELEMS,
        move |g, x| {
            let p = g.layer_points(&f1, x[1])?;
            Ok(g.gather(x[0], &c1, p)?.0)
        },
    )?);
    for (name, eps) in [("splat_project", None), ("splat_project_normalized", Some(SPLAT_EPS))] {
        let (f1, c1) = (f.clone(), cam.clone());
        out.push(check_inputs(
            name,
            &[rand(&[2, 5, 5, 2], -1.0, 1.0, r), rand(&[2, 5, 5], 1.5, 4.0, r)],
            MAX_ELEMS,
            move |g, x| {
                let p = g.layer_points(&f1, x[1])?;
                g.splat(x[0], &c1, p, eps)
            },
        )?);
    }
    Ok(out)
}

pub(super) fn ldm() -> Result<Vec<CheckResult>> {
    let r = &mut rng(3);
    let mut out = Vec::new();
    out.push(check_inputs("activate_depth", &[rand(&[3, 2, 2], -2.0, 2.0, r)], MAX_ELEMS, |g, x| {
        g.depth_activation(x[0], 1.0, 6.0)
    })?);
    out.push(check_inputs(
        "over_composite",
        &[rand(&[3, 2, 3, 2], -1.0, 1.0, r), rand(&[3, 2, 3], 0.05, 0.95, r)],
        MAX_ELEMS,
        |g, x| g.over_composite(x[0], x[1]),
    )?);
    let mask = Tensor::from_fn(&[3, 2, 2, 2], |i| if i % 5 == 3 { 0.0 } else { 1.0 });
    out.push(check_inputs(
        "masked_blend",
        &[rand(&[2, 2, 2, 3], 0.05, 1.0, r), rand(&[3, 2, 2, 2, 2], -1.0, 1.0, r)],
        MAX_ELEMS,
        move |g, x| g.masked_blend(x[0], x[1], mask.clone()),
    )?);
    let cams = vec![
        Camera::axis_aligned(Vector3::new(0.08, 0.0, 0.0), 12.0, 16, 16),
        Camera::axis_aligned(Vector3::new(-0.05, 0.06, 0.0), 12.0, 16, 16),
    ];
    let cams2 = cams.clone();
    out.push(check_inputs(
        "render_target",
        &[
            rand(&[2, 8, 8], -1.0, 1.0, r),
            rand(&[2, 8, 8], -1.5, 1.5, r),
            rand(&[2, 8, 8, 2], -1.0, 1.0, r),
            rand(&[16, 16, 3], 0.0, 1.0, r),
            rand(&[16, 16, 3], 0.0, 1.0, r),
        ],
        MAX_ELEMS,
        move |g, x| {
            let f = target();
            let vars = LdmVars {
                depth: g.depth_activation(x[0], f.near, f.far)?,
                sigma: g.sigmoid(x[1])?,
                beta: g.softmax(x[2], 3)?,
            };
            render_target_graph(g, &f, vars, &[x[3], x[4]], &cams2, None)
        },
    )?);
    let view = Camera::axis_aligned(Vector3::new(0.1, 0.05, 0.0), 7.0, 8, 8);
    out.push(check_inputs(
        "render_to_input_view",
        &[
            rand(&[2, 4, 4, 4], -1.0, 1.0, r),
            rand(&[4, 1], -1.0, 1.0, r),
            rand(&[4, 1], -1.0, 1.0, r),
            rand(&[4, 3], -1.0, 1.0, r),
        ],
        MAX_ELEMS,
        move |g, x| {
            let f = target();
            let d = crate::ldm::activate_depth(g, x[0], x[2], &f)?;
            let s = crate::ldm::activate_density(g, x[0], x[1])?;
            let a = g.matmul(x[0], x[3])?;
            let a = g.sigmoid(a)?;
            let p = g.layer_points(&f, d)?;
            render_intermediate(g, a, s, p, &view)
        },
    )?);
    out.push(check_inputs(
        "upsample_activate",
        &[
            rand(&[2, 3, 3], -1.0, 1.0, r),
            rand(&[2, 3, 3], -1.0, 1.0, r),
            rand(&[2, 3, 3, 3], -1.0, 1.0, r),
        ],
        MAX_ELEMS,
        |g, x| {
            let v = upsample_activate(g, x[0], x[1], x[2], 2.5, &target())?;
            let a = g.reshape(v.depth, &[2 * 8 * 8])?;
            let b = g.reshape(v.sigma, &[2 * 8 * 8])?;
            let c = g.reshape(v.beta, &[2 * 8 * 8 * 3])?;
            g.concat(&[a, b, c], 0)
        },
    )?);
    Ok(out)
}

pub(super) fn attention() -> Result<Vec<CheckResult>> {
    let r = &mut rng(4);
    let mut out = Vec::new();
    for (name, zero_keys) in [("one_to_many_attention", false), ("one_to_many_zero_keys", true)] {
        out.push(check_inputs(
            name,
            &[
                rand(&[3, 8], -1.0, 1.0, r),
                rand(&[3, 4, 8], -1.0, 1.0, r),
                rand(&[8, 16], -1.0, 1.0, r),
                rand(&[16, 8], -1.0, 1.0, r),
            ],
            MAX_ELEMS,
            move |g, x| one_to_many_graph(g, x[0], x[1], x[2], x[3], 2, zero_keys),
        )?);
    }
    let (l, h, w, m, c) = (2, 4, 4, 2, 8);
    let mut store = ParamStore::<f64>::new(5);
    init_fusion_attention(&mut store, "fb.attn", c, 2)?;
    init_fusion_conv(&mut store, "fb.conv0", c)?;
    // nonzero biases and gains so their gradients are exercised
    for n in ["fb.attn.bo", "fb.conv0.b1", "fb.conv0.b2"] {
        store.insert(n, rand(&[c], -0.2, 0.2, r));
    }
    store.insert("fb.attn.norm", rand(&[c], 0.5, 1.5, r));
    store.insert("in.v", rand(&[l, h, w, c], -1.0, 1.0, r));
    store.insert("in.deltas", rand(&[l * h * w, m, c], -1.0, 1.0, r));
    let names: Vec<String> = store.names().map(String::from).collect();
    out.push(check_params("fusion_block", &store, &names, MAX_ELEMS, |g, s| {
        let v = g.param(s, "in.v")?;
        let d = g.param(s, "in.deltas")?;
        fusion_block(g, s, "fb", v, d, 2, 1, false)
    })?);
    Ok(out)
}

pub(super) fn network() -> Result<Vec<CheckResult>> {
    crate::network::gradcheck_cases(MAX_ELEMS)
}

