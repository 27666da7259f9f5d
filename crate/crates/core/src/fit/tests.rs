use super::*;
use crate::ldm::{band_limits, depth_from_tanh};
use crate::scenes::{make_scene, oracle_render, RigSpec};

fn bundle(seed: u64, planes: usize) -> (Vec<Tensor<f64>>, Vec<Camera>, RigSpec) {
    let rig = RigSpec::small(4);
    let scene = make_scene(seed, planes, &rig.reference().unwrap()).unwrap();
    let cams = rig.cameras().unwrap();
    let images = cams.iter().map(|c| oracle_render(&scene, c).0).collect();
    (images, cams, rig)
}

fn problem(seed: u64, planes: usize) -> FitProblem<f64> {
    let (images, cams, rig) = bundle(seed, planes);
    FitProblem::leave_one_out(images, cams, rig.near, rig.far, 0).unwrap()
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::<f64>::full(&[4, 4, 3], 0.3);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let z = Tensor::<f64>::zeros(&[4, 4, 3]);
    let o = Tensor::<f64>::ones(&[4, 4, 3]);
    assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert!(matches!(psnr(&a, &Tensor::zeros(&[4, 3, 3])), Err(Error::Dimension(_))));
}

#[test]
fn masked_psnr_ignores_uncovered_pixels() {
    let a = Tensor::<f64>::zeros(&[2, 2, 3]);
    let mut b = a.clone();
    b.set(&[0, 0, 1], 1.0);
    let mask = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(psnr_masked(&a, &b, Some(&mask)).unwrap(), f64::INFINITY);
    assert!(psnr_masked(&a, &b, Some(&Tensor::zeros(&[2, 2]))).is_err());
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let cfg = FitConfig::default();
    let mut store = ParamStore::<f64>::new(0);
    store.insert("p", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let mut g = Graph::new();
    let p = g.param(&store, "p").unwrap();
    let w = g.constant(Tensor::from_f64(&[3], &[3.0, -0.01, 0.0]).unwrap());
    let y = g.mul(p, w).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    let mut adam = Adam::new(&cfg);
    adam.step(&mut store, &grads, |_| 0.01).unwrap();
    let d = store.get("p").unwrap().data().to_vec();
    assert!((d[0] - (1.0 - 0.01)).abs() < 1e-9);
    assert!((d[1] - (-2.0 + 0.01)).abs() < 1e-6);
    assert_eq!(d[2], 0.5);
    assert_eq!(adam.steps_taken(), 1);
}

#[test]
fn zero_step_fit_is_the_initialization() {
    let p = problem(1, 1);
    let cfg = FitConfig {
        steps: 0,
        ..FitConfig::default()
    };
    let (ldm, report) = fit_raw_ldm(&p, 2, &cfg).unwrap();
    assert!(report.losses.is_empty());
    ldm.check_invariants().unwrap();
    for l in 0..2 {
        let anchor = depth_from_tanh(l, 2, p.target.near, p.target.far, 0.0);
        assert!(ldm.depth.index0(l).data().iter().all(|&d| d == anchor));
    }
    assert!(ldm.density.data().iter().all(|&s| s == 0.5));
    assert!(ldm.blend.data().iter().all(|&b| b == 0.25));
    assert!(report.to_csv().starts_with("step,loss\n# psnr_db,view_000,"));
}

#[test]
fn short_fit_reduces_loss_and_keeps_invariants() {
    let p = problem(2, 1);
    let cfg = FitConfig {
        steps: 40,
        ..FitConfig::default()
    };
    let (ldm, report) = fit_raw_ldm(&p, 2, &cfg).unwrap();
    ldm.check_invariants().unwrap();
    assert_eq!(report.losses.len(), 40);
    assert!(report.final_loss().unwrap() < 0.5 * report.initial_loss().unwrap(), "{:?}", report.losses);
    assert!(report.coverage > 0.99);
    for l in 0..2 {
        let (lo, hi) = band_limits(l, 2, p.target.near, p.target.far);
        assert!(ldm.depth.index0(l).data().iter().all(|&d| d >= lo && d <= hi));
    }
}

#[test]
fn fit_is_invariant_to_view_order() {
    let (images, cams, rig) = bundle(3, 2);
    let cfg = FitConfig {
        steps: 15,
        ..FitConfig::default()
    };
    let a = FitProblem::leave_one_out(images.clone(), cams.clone(), rig.near, rig.far, 0).unwrap();
    let order = [2, 3, 0, 1];
    let b = FitProblem::leave_one_out(
        order.iter().map(|&i| images[i].clone()).collect(),
        order.iter().map(|&i| cams[i].clone()).collect(),
        rig.near,
        rig.far,
        2,
    )
    .unwrap();
    let (la, ra) = fit_raw_ldm(&a, 2, &cfg).unwrap();
    let (lb, rb) = fit_raw_ldm(&b, 2, &cfg).unwrap();
    for (x, y) in ra.losses.iter().zip(&rb.losses) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
    assert!(la.depth.max_abs_diff(&lb.depth) < 1e-6);
}

#[test]
fn nan_input_reports_the_step() {
    let mut p = problem(4, 1);
    p.images[1].data_mut()[7] = f64::NAN;
    match fit_raw_ldm(&p, 2, &FitConfig::default()) {
        Err(Error::Fit { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a fit error, got {other:?}"),
    }
}

#[test]
fn problem_rejections() {
    let (images, cams, rig) = bundle(5, 1);
    assert!(FitProblem::leave_one_out(images.clone(), cams.clone(), rig.near, rig.far, 4).is_err());
    assert!(FitProblem::leave_one_out(images[..1].to_vec(), cams[..1].to_vec(), rig.near, rig.far, 0).is_err());
    assert!(FitProblem::leave_one_out(images[..2].to_vec(), cams.clone(), rig.near, rig.far, 0).is_err());
    let p = problem(5, 1);
    let bad = FitConfig {
        lr: 0.0,
        ..FitConfig::default()
    };
    assert!(matches!(fit_raw_ldm(&p, 2, &bad), Err(Error::Schema { .. })));
    assert!(fit_raw_ldm(&p, 0, &FitConfig::default()).is_err());
}

#[test]
fn nano_training_is_deterministic() {
    let model = ModelConfig::nano();
    let scene = TrainScene::<f32>::synthetic(0, 0.1, &model).unwrap();
    let cfg = FitConfig {
        steps: 2,
        lr: 1e-3,
        ..FitConfig::default()
    };
    let (pa, ra) = train_nano(&scene, &model, &cfg).unwrap();
    let (pb, rb) = train_nano(&scene, &model, &cfg).unwrap();
    assert_eq!(ra.losses, rb.losses);
    for (name, t) in pa.iter() {
        assert_eq!(t, pb.get(name).unwrap(), "{name}");
    }
}
