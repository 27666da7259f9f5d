use std::path::Path;
use std::process::{Command, Output};

use ldm_core::io::bundle::SceneBundle;
use ldm_core::io::image::read_pfm;
use ldm_core::io::save_ldm;
use ldm_core::ldm::{depth_from_tanh, Ldm};
use ldm_core::network::ModelConfig;
use ldm_core::tensor::Tensor;

fn ldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldm"))
        .args(args)
        .output()
        .expect("spawn ldm")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate-scene", "--seed", "3", "--out", s(dir)];
    args.extend_from_slice(extra);
    let o = ldm(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_counts_views() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    generate(&a, &["--views", "4"]);
    generate(&b, &["--views", "4"]);
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".pfm")).count(), 4);
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 4);
    assert_eq!(SceneBundle::read(&a).unwrap().cameras.len(), 4);
}

#[test]
fn zero_baseline_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = ldm(&["generate-scene", "--baseline", "0", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--baseline"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = ldm(&["generate-scene", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn zero_step_fit_writes_initialization_and_empty_curve() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &["--planes", "1"]);
    let (out, rep) = (t.path().join("l.qntc"), t.path().join("fit.csv"));
    let o = ldm(&["fit-ldm", "--scene", s(&scene), "--steps", "0", "--out", s(&out), "--report", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&rep).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    assert!(lines.all(|l| l.starts_with('#')));
    let l: Ldm<f32> = ldm_core::io::load_ldm(&out).unwrap();
    l.check_invariants().unwrap();
    assert_eq!(l.layers(), 2);
}

#[test]
fn corrupt_cameras_name_the_field() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), &["--views", "2"]);
    let p = t.path().join("cameras.json");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, text.replacen("\"fx\": 64.0", "\"fx\": \"wide\"", 1)).unwrap();
    let o = ldm(&["fit-ldm", "--scene", s(t.path()), "--steps", "1", "--out", s(&t.path().join("x.qntc"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cameras.json[0].fx"), "{}", stderr(&o));
}

fn transparent_ldm(bundle: &SceneBundle, views: usize) -> Ldm<f32> {
    let f = bundle.frustums().unwrap().remove(0);
    let (h, w, l) = (f.camera.height, f.camera.width, 2);
    Ldm {
        depth: Tensor::from_fn(&[l, h, w], |i| depth_from_tanh(i / (h * w), l, f.near, f.far, 0.0) as f32),
        density: Tensor::zeros(&[l, h, w]),
        blend: Tensor::full(&[l, h, w, views], 1.0 / views as f32),
        frustum: f,
    }
}

#[test]
fn transparent_ldm_renders_black() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &[]);
    let bundle = SceneBundle::read(&scene).unwrap();
    let path = t.path().join("clear.qntc");
    save_ldm(&path, &transparent_ldm(&bundle, 4)).unwrap();
    for i in ["0", "1"] {
        let img = t.path().join(format!("r{i}.pfm"));
        let o = ldm(&["render", "--ldm", s(&path), "--scene", s(&scene), "--camera-index", i, "--out", s(&img)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(read_pfm(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn render_rejects_view_count_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &[]);
    let bundle = SceneBundle::read(&scene).unwrap();
    let path = t.path().join("three.qntc");
    save_ldm(&path, &transparent_ldm(&bundle, 3)).unwrap();
    let out = t.path().join("r.pfm");
    let o = ldm(&["render", "--ldm", s(&path), "--scene", s(&scene), "--camera-index", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("contract"), "{}", stderr(&o));
}

#[test]
fn gradcheck_filters_by_module() {
    let o = ldm(&["gradcheck", "--module", "attention"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let sections: Vec<&str> = text.lines().filter(|l| l.starts_with('[')).collect();
    assert_eq!(sections, ["[attention]"]);
}

#[test]
fn forward_demo_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &[]);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = ldm(&["forward-demo", "--scene", s(&scene), "--seed", "9", "--out", s(d)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["depth.pfm", "ldm.qntc", "op_counts.csv", "sigma_00.pfm", "sigma_03.ppm", "target.pfm"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    let counts = String::from_utf8(fa.iter().find(|(n, _)| n == "op_counts.csv").unwrap().1.clone()).unwrap();
    assert!(counts.contains("max residual = 0"));
}

#[test]
fn forward_demo_rejects_mismatched_config() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &[]);
    let cfg = ModelConfig {
        views: 2,
        ..ModelConfig::nano()
    };
    let cp = t.path().join("two.json");
    std::fs::write(&cp, cfg.to_json()).unwrap();
    let out = t.path().join("out");
    let o = ldm(&["forward-demo", "--scene", s(&scene), "--config", s(&cp), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn train_nano_rejects_bad_learning_rate() {
    let o = ldm(&["train-nano", "--steps", "1", "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn fitted_single_plane_renders_and_recovers_depth() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &["--planes", "1"]);
    let l = t.path().join("one.qntc");
    let o = ldm(&["fit-ldm", "--scene", s(&scene), "--layers", "1", "--steps", "400", "--out", s(&l)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (img, depth) = (t.path().join("r.pfm"), t.path().join("d.pfm"));
    let o = ldm(&[
        "render",
        "--ldm",
        s(&l),
        "--scene",
        s(&scene),
        "--camera-index",
        "0",
        "--out",
        s(&img),
        "--depth",
        s(&depth),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let oracle = read_pfm(&scene.join("view_000.pfm")).unwrap();
    let p = ldm_core::fit::psnr(&read_pfm(&img).unwrap(), &oracle).unwrap();
    assert!(p >= 30.0, "psnr {p}");

    // composited depth is soft, so only the median is held to a tight bound
    let z = SceneBundle::read(&scene).unwrap().scene.unwrap().planes[0].depth as f32;
    let mut rel: Vec<f32> = read_pfm(&depth).unwrap().data().iter().map(|d| (d - z).abs() / z).collect();
    rel.sort_by(f32::total_cmp);
    let median = rel[rel.len() / 2];
    assert!(median < 0.1, "median relative depth error {median}");
}

#[test]
fn depth_output_needs_the_ldm_camera() {
    let t = tempfile::tempdir().unwrap();
    let scene = t.path().join("scene");
    generate(&scene, &[]);
    let bundle = SceneBundle::read(&scene).unwrap();
    let path = t.path().join("clear.qntc");
    save_ldm(&path, &transparent_ldm(&bundle, 4)).unwrap();
    let (img, depth) = (t.path().join("r.pfm"), t.path().join("d.pfm"));
    let o = ldm(&[
        "render",
        "--ldm",
        s(&path),
        "--scene",
        s(&scene),
        "--camera-index",
        "2",
        "--out",
        s(&img),
        "--depth",
        s(&depth),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!depth.exists());
}
