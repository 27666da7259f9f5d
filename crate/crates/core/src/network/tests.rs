use super::*;
use crate::ldm::Ldm;

fn rig(m: usize) -> (Vec<Camera>, Frustum, Vec<Tensor<f64>>) {
    let cfg = ModelConfig::nano();
    let (cams, target) = counting_rig(&cfg, m);
    let imgs = (0..m)
        .map(|v| {
            Tensor::from_fn(&[64, 64, 3], |i| {
                let (p, c) = (i / 3, i % 3);
                let (y, x) = ((p / 64) as f64, (p % 64) as f64);
                0.5 + 0.4 * ((x + 3.0 * v as f64) * 0.3 + c as f64).sin() * (y * 0.2).cos()
            })
        })
        .collect();
    (cams, target, imgs)
}

#[test]
fn nano_forward_yields_valid_ldm() {
    let cfg = ModelConfig::nano();
    let store = init_params::<f64>(&cfg, 11).unwrap();
    let (cams, target, imgs) = rig(4);
    let (g, out, img) = predict(&store, &cfg, &imgs, &cams, &target).unwrap();
    let ldm = Ldm::from_graph(&g, out.ldm, &target);
    assert_eq!(ldm.depth.shape(), &[4, 64, 64]);
    assert_eq!(ldm.blend.shape(), &[4, 64, 64, 4]);
    ldm.check_invariants().unwrap();
    assert_eq!(g.shape(img), &[64, 64, 3]);
    assert_eq!(g.shape(out.blend_logits), &[4, 32, 32, 4]);
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::nano();
    let (cams, target, imgs) = rig(2);
    let a = {
        let s = init_params::<f64>(&cfg, 5).unwrap();
        let (g, _, i) = predict(&s, &cfg, &imgs, &cams, &target).unwrap();
        g.value(i).clone()
    };
    let s = init_params::<f64>(&cfg, 5).unwrap();
    let (g, _, i) = predict(&s, &cfg, &imgs, &cams, &target).unwrap();
    assert_eq!(g.value(i), &a);
}

#[test]
fn view_permutation_leaves_render_unchanged() {
    let cfg = ModelConfig::nano();
    let store = init_params::<f64>(&cfg, 2).unwrap();
    let (cams, target, imgs) = rig(3);
    let (g, _, a) = predict(&store, &cfg, &imgs, &cams, &target).unwrap();
    let perm = [2, 0, 1];
    let pc: Vec<Camera> = perm.iter().map(|&i| cams[i].clone()).collect();
    let pi: Vec<Tensor<f64>> = perm.iter().map(|&i| imgs[i].clone()).collect();
    let (g2, out2, b) = predict(&store, &cfg, &pi, &pc, &target).unwrap();
    assert!(g.value(a).max_abs_diff(g2.value(b)) < 1e-5);
    assert_eq!(g2.shape(out2.ldm.beta), &[4, 64, 64, 3]);
}

#[test]
fn update_features_have_view_layer_shape() {
    let cfg = ModelConfig::nano();
    let store = init_params::<f64>(&cfg, 2).unwrap();
    let (cams, target, imgs) = rig(2);
    let mut g = Graph::new();
    let vars: Vec<Var> = imgs.iter().map(|i| g.constant(i.clone())).collect();
    let batch = stack_views(&mut g, &vars).unwrap();
    let p = encode_inputs(&mut g, &store, &cfg, batch, &cams, &target).unwrap();
    let s0 = initialize(&mut g, &store, &cfg, &p, &cams, &target).unwrap();
    assert_eq!(g.shape(s0.deltas), &[8 * 8 * 8, 2, 8]);
    assert_eq!(g.shape(s0.v), &[8, 8, 8, 8]);
    let s1 = update_and_fuse(&mut g, &store, &cfg, 1, s0, &p, &cams, &target).unwrap();
    let s2 = update_and_fuse(&mut g, &store, &cfg, 2, s1, &p, &cams, &target).unwrap();
    assert_eq!(g.shape(s2.deltas), &[8 * 16 * 16, 2, 8]);
    let s3 = update_and_fuse(&mut g, &store, &cfg, 3, s2, &p, &cams, &target).unwrap();
    assert_eq!(g.shape(s3.v), &[4, 32, 32, 8]);
}

#[test]
fn initial_volume_is_a_broadcast_before_fusion() {
    let mut cfg = ModelConfig::nano();
    cfg.steps.truncate(1);
    cfg.steps[0] = StepConfig::new(8, 32, 32, 1, "Bp,A1,C");
    let mut store = init_params::<f64>(&cfg, 3).unwrap();
    // zero both residual branches so V stays the broadcast
    let wo = store.get("s0.fuse0.attn.wo").unwrap().shape().to_vec();
    store.insert("s0.fuse0.attn.wo", Tensor::zeros(&wo));
    store.insert("s0.fuse0.conv0.k2", Tensor::zeros(&[3, 3, 8, 8]));
    let (cams, target, imgs) = rig(2);
    let mut g = Graph::new();
    let vars: Vec<Var> = imgs.iter().map(|i| g.constant(i.clone())).collect();
    let batch = stack_views(&mut g, &vars).unwrap();
    let p = encode_inputs(&mut g, &store, &cfg, batch, &cams, &target).unwrap();
    let s = initialize(&mut g, &store, &cfg, &p, &cams, &target).unwrap();
    let c0 = store.get(INIT_FEATURE).unwrap();
    for px in g.value(s.v).data().chunks(8) {
        assert_eq!(px, c0.data());
    }
}

#[test]
fn flat_initial_deltas_match_plane_sweep() {
    // back-projection through anchor depths equals sampling each view at fronto-parallel planes
    let mut cfg = ModelConfig::nano();
    cfg.steps.truncate(1);
    cfg.steps[0] = StepConfig::new(4, 32, 32, 1, "Bp,A1,C");
    let store = init_params::<f64>(&cfg, 3).unwrap();
    let (cams, target, imgs) = rig(2);
    let mut g = Graph::new();
    let vars: Vec<Var> = imgs.iter().map(|i| g.constant(i.clone())).collect();
    let batch = stack_views(&mut g, &vars).unwrap();
    let p = encode_inputs(&mut g, &store, &cfg, batch, &cams, &target).unwrap();
    let s = initialize(&mut g, &store, &cfg, &p, &cams, &target).unwrap();
    // recompute the CNN output for view 1 and sample it with an independent plane sweep
    let x = g.concat(&[p.features(1), p.rays(1)], 3).unwrap();
    let k = g.param(&store, "s0.update.stem.k").unwrap();
    let b = g.param(&store, "s0.update.stem.b").unwrap();
    let mut y = g.conv3x3(x, k, b).unwrap();
    for j in 0..cfg.update_blocks {
        y = encoder::residual_block(&mut g, &store, &format!("s0.update.r{j}"), y).unwrap();
    }
    let feat = g.value(y).index0(1);
    let cam = cams[1].resized(32, 32);
    let deltas = g.value(s.deltas);
    let tc = &target.camera;
    for l in 0..4 {
        let z = depth_from_tanh(l, 4, target.near, target.far, 0.0);
        for (i, j) in [(3usize, 5usize), (16, 16), (30, 1)] {
            // target texel (i, j) of a 32x32 layer maps to target pixel ((j+.5)*2, (i+.5)*2)
            let u = (j as f64 + 0.5) * tc.width as f64 / 32.0;
            let v = (i as f64 + 0.5) * tc.height as f64 / 32.0;
            let world = tc.unproject(u, v, z);
            let (pu, pv) = cam.project(&world).unwrap();
            // bilinear sample at pixel centres
            let (fx, fy) = (pu - 0.5, pv - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let clamp = |a: f64| a.clamp(0.0, 31.0) as usize;
            let t = (l * 32 + i) * 32 + j;
            for ch in 0..8 {
                let at = |yy: f64, xx: f64| feat.get(&[clamp(yy), clamp(xx), ch]);
                let want = (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1.0))
                    + ay * ((1.0 - ax) * at(y0 + 1.0, x0) + ax * at(y0 + 1.0, x0 + 1.0));
                let got = deltas.get(&[t, 1, ch]);
                assert!((got - want).abs() < 1e-9, "layer {l} texel ({i},{j}) ch {ch}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn zero_update_cnn_gives_zero_deltas() {
    let cfg = ModelConfig::nano();
    let mut store = init_params::<f64>(&cfg, 3).unwrap();
    let names: Vec<String> = store.names().filter(|n| n.starts_with("s1.update")).map(String::from).collect();
    for n in names {
        let s = store.get(&n).unwrap().shape().to_vec();
        store.insert(&n, Tensor::zeros(&s));
    }
    let (cams, target, imgs) = rig(2);
    let mut g = Graph::new();
    let vars: Vec<Var> = imgs.iter().map(|i| g.constant(i.clone())).collect();
    let batch = stack_views(&mut g, &vars).unwrap();
    let p = encode_inputs(&mut g, &store, &cfg, batch, &cams, &target).unwrap();
    let s0 = initialize(&mut g, &store, &cfg, &p, &cams, &target).unwrap();
    let s1 = update_and_fuse(&mut g, &store, &cfg, 1, s0, &p, &cams, &target).unwrap();
    assert!(g.value(s1.deltas).data().iter().all(|&x| x == 0.0));
}

#[test]
fn ablations_change_the_output() {
    let (cams, target, imgs) = rig(2);
    let base = ModelConfig::nano();
    let store = init_params::<f64>(&base, 8).unwrap();
    let (g, _, reference) = predict(&store, &base, &imgs, &cams, &target).unwrap();
    let reference = g.value(reference).clone();
    let flags: [fn(&mut Ablation); 4] = [
        |a| a.zero_keys = true,
        |a| a.zero_ray_encoding = true,
        |a| a.zero_rendered = true,
        |a| a.direct_rgb = true,
    ];
    for set in flags {
        let mut cfg = base.clone();
        set(&mut cfg.ablation);
        let (g, out, img) = predict(&store, &cfg, &imgs, &cams, &target).unwrap();
        assert!(g.value(img).max_abs_diff(&reference) > 1e-6, "{:?}", cfg.ablation);
        assert_eq!(out.rgb.is_some(), cfg.ablation.direct_rgb);
    }
}

#[test]
fn op_count_is_affine_in_views() {
    let r = op_count_decomposition(&ModelConfig::nano(), 1, &[2, 4, 8]).unwrap();
    assert!(r.is_exact(), "{}", r.to_text());
    assert!(r.per_image > 0 && r.volume_term > 0);
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = ModelConfig::nano();
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let (cams, target, imgs) = rig(2);
    assert!(predict(&store, &cfg, &imgs[..1], &cams, &target).is_err());
    let small = vec![Tensor::zeros(&[32, 32, 3]); 2];
    assert!(predict(&store, &cfg, &small, &cams, &target).is_err());
    let mut bad = cfg.clone();
    bad.steps[2].layers = 3;
    assert!(matches!(
        predict(&store, &bad, &imgs, &cams, &target),
        Err(Error::Schema { .. })
    ));
}
