use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ldm_core::attention::{flop_count, one_to_many_attention, OtmAttnParams, StdAttnParams, Variant};
use ldm_core::autodiff::Graph;
use ldm_core::fit::{Adam, FitConfig};
use ldm_core::geometry::{gather_backproject, layer_world_points, splat_project, Camera, Frustum};
use ldm_core::io::container::{AnyTensor, Container};
use ldm_core::io::image::{decode_pfm, encode_pfm};
use ldm_core::ldm::{band_limits, over_composite};
use ldm_core::params::ParamStore;
use ldm_core::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn depth_stays_in_its_band(
        logits in prop::collection::vec(-1e4f64..1e4, 1..40),
        layers in 1usize..9,
        near in 0.1f64..5.0,
        span in 0.5f64..100.0,
    ) {
        let far = near + span;
        let n = logits.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[layers, n], logits.iter().cycle().take(layers * n).copied().collect()).unwrap());
        let d = g.depth_activation(x, near, far).unwrap();
        for (i, &v) in g.value(d).data().iter().enumerate() {
            let (lo, hi) = band_limits(i / n, layers, near, far);
            prop_assert!(v >= lo && v <= hi, "layer {} depth {} outside [{}, {}]", i / n, v, lo, hi);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), m in 1usize..9, scale in 0.01f64..200.0) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::rand_uniform(&[2, 3, 4, m], -scale, scale, &mut rng(seed)));
        let b = g.softmax(x, 3).unwrap();
        for row in g.value(b).data().chunks(m) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn splat_gather_adjoint(seed in any::<u64>(), tx in -0.5f64..0.5, ty in -0.5f64..0.5, layers in 1usize..4) {
        let mut r = rng(seed);
        let target = Frustum::new(Camera::axis_aligned(Vector3::zeros(), 8.0, 7, 6), 1.0, 10.0).unwrap();
        let view = Camera::axis_aligned(Vector3::new(tx, ty, 0.0), 11.0, 9, 8);
        let d = Tensor::<f64>::rand_uniform(&[layers, 6, 7], 1.2, 9.0, &mut r);
        let p = layer_world_points(&target, &d).unwrap();
        let v = Tensor::<f64>::rand_uniform(&[layers, 6, 7, 2], -1.0, 1.0, &mut r);
        let u = Tensor::<f64>::rand_uniform(&[8, 9, 2], -1.0, 1.0, &mut r);
        let pv = splat_project(&v, &view, &p, None).unwrap();
        let (pu, _) = gather_backproject(&u, &view, &p).unwrap();
        let lhs: f64 = (0..layers).map(|l| pv.index0(l).dot(&u)).sum();
        let rhs = v.dot(&pu);
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-9));
    }

    #[test]
    fn composite_stays_within_layer_values(seed in any::<u64>(), layers in 1usize..6, opaque_back in any::<bool>()) {
        let mut r = rng(seed);
        let vals = Tensor::<f64>::rand_uniform(&[layers, 4, 5, 3], 0.2, 0.8, &mut r);
        let mut sigma = Tensor::<f64>::rand_uniform(&[layers, 4, 5], 0.0, 1.0, &mut r);
        if opaque_back {
            sigma.data_mut()[..20].iter_mut().for_each(|s| *s = 1.0);
        }
        let out = over_composite(&vals, &sigma).unwrap();
        let lo = if opaque_back { 0.2 } else { 0.0 };
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= 0.8 + 1e-12));
    }

    #[test]
    fn one_to_many_ignores_delta_order(seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 4]), n in 2usize..12) {
        let mut r = rng(seed);
        let sp = StdAttnParams::<f64>::random(8, heads, &mut r).unwrap();
        let op = OtmAttnParams::from_standard(&sp);
        let q = Tensor::<f64>::rand_uniform(&[8], -1.0, 1.0, &mut r);
        let k = Tensor::<f64>::rand_uniform(&[n, 8], -1.0, 1.0, &mut r);
        let rows: Vec<usize> = (0..n).rev().collect();
        let perm = Tensor::from_fn(&[n, 8], |i| k.data()[rows[i / 8] * 8 + i % 8]);
        let a = one_to_many_attention(&q, &k, &op).unwrap();
        let b = one_to_many_attention(&q, &perm, &op).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn flop_counts_are_affine_in_inputs(n in 1u64..500, h in 1u64..16, dk in 1u64..128) {
        let s = |n| flop_count(Variant::Standard, n, h, dk).unwrap().flops;
        let o = |n| flop_count(Variant::OneToMany, n, h, dk).unwrap().flops;
        prop_assert_eq!(s(n + 1) - s(n), 2 * dk * dk + dk);
        prop_assert_eq!(o(n + 1) - o(n), h * dk);
    }

    #[test]
    fn adam_step_is_bounded_by_lr(seed in any::<u64>(), lr in 1e-12f64..1e-3) {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new(0);
        let w = Tensor::<f64>::rand_uniform(&[5], -1.0, 1.0, &mut r);
        store.insert("p", Tensor::rand_uniform(&[5], -2.0, 2.0, &mut r));
        let before = store.get("p").unwrap().clone();
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let wv = g.constant(w);
        let y = g.mul(p, wv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        Adam::new(&FitConfig::default()).step(&mut store, &grads, |_| lr).unwrap();
        let moved = store.get("p").unwrap().max_abs_diff(&before);
        prop_assert!(moved <= lr * (1.0 + 1e-9));
    }

    #[test]
    fn container_round_trip(
        values in prop::collection::vec(any::<u64>(), 0..64),
        dims in prop::collection::vec(1usize..4, 0..4),
        name in "[a-z][a-z0-9._ ]{0,20}",
    ) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = values.iter().cycle().take(if values.is_empty() { 0 } else { n }).map(|&b| f64::from_bits(b)).collect();
        prop_assume!(data.len() == n);
        let mut c = Container::new();
        c.insert(&name, AnyTensor::F64(Tensor::new(&dims, data.clone()).unwrap())).unwrap();
        c.insert("f32", AnyTensor::F32(Tensor::new(&dims, data.iter().map(|&v| f32::from_bits(v.to_bits() as u32)).collect()).unwrap())).unwrap();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert!(back.entries().iter().zip(c.entries()).all(|(a, b)| a.0 == b.0 && a.1.bits_eq(&b.1)));
    }

    #[test]
    fn pfm_round_trip(bits in prop::collection::vec(any::<u32>(), 1..40), color in any::<bool>()) {
        let c = if color { 3 } else { 1 };
        let w = bits.len();
        let data: Vec<f32> = bits.iter().cycle().take(2 * w * c).map(|&b| f32::from_bits(b)).collect();
        let img = if color { Tensor::new(&[2, w, 3], data).unwrap() } else { Tensor::new(&[2, w], data).unwrap() };
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        prop_assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
