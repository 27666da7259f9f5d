//! End-to-end acceptance checks, one `PASS`/`FAIL` line per criterion.
//! Runs without the libtest harness so the lines are always shown.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ldm_core::attention::{one_to_many_attention, standard_cross_attention, OtmAttnParams, StdAttnParams};
use ldm_core::autodiff::{fault, Graph};
use ldm_core::error::Error;
use ldm_core::fit::{self, FitConfig, TrainScene};
use ldm_core::geometry::{gather_backproject, layer_world_points, splat_project, Camera, CameraRecord, Frustum};
use ldm_core::gradcheck::Suite;
use ldm_core::io::bundle::SceneBundle;
use ldm_core::io::container::{AnyTensor, Container};
use ldm_core::io::image::{decode_pfm, encode_pfm};
use ldm_core::io::parse_json;
use ldm_core::ldm::{head_logits, upsample_activate, DecodeHeads, Ldm};
use ldm_core::network::{self, decode_blend_logits, ModelConfig};
use ldm_core::tensor::{Real, Tensor};

fn ldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldm"))
        .args(args)
        .output()
        .expect("spawn ldm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report(n: u32, what: &str, ok: bool, detail: &str) -> bool {
    println!("criterion {n:>2} {}: {what} ({detail})", if ok { "PASS" } else { "FAIL" });
    ok
}

fn csv_column(text: &str, header: &str, col: usize) -> Vec<u64> {
    let mut lines = text.lines().skip_while(|l| !l.starts_with(header)).skip(1);
    let mut out = Vec::new();
    for l in lines.by_ref() {
        let Some(v) = l.split(',').nth(col).and_then(|s| s.parse().ok()) else {
            break;
        };
        out.push(v);
    }
    out
}

fn c01_flop_tables() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let t = Instant::now();
    let o = ldm(&["bench-attention", "--dk", "32", "--no-timing", "--csv", a.to_str().unwrap()]);
    let elapsed = t.elapsed();
    assert!(o.status.success());
    let o2 = ldm(&["bench-attention", "--csv", b.to_str().unwrap()]);
    assert!(o2.status.success());
    let ta = std::fs::read_to_string(&a).unwrap();
    let tb = std::fs::read_to_string(&b).unwrap();

    let heads_std = csv_column(&ta, "heads,", 1);
    let heads_otm = csv_column(&ta, "heads,", 2);
    let speedups: Vec<&str> = ta.lines().skip(1).take(4).map(|l| l.split(',').nth(3).unwrap()).collect();
    let in_std = csv_column(&ta, "inputs,", 1);
    let in_otm = csv_column(&ta, "inputs,", 3);
    // only the analytic columns are compared between runs; the rest is wall-clock
    let analytic = |s: &str| -> Vec<String> {
        let mut keep = 4;
        s.lines()
            .map(|l| {
                if l.starts_with("inputs,") {
                    keep = 5;
                }
                l.split(',').take(keep).collect::<Vec<_>>().join(",")
            })
            .collect()
    };
    let ok = heads_std == [18688; 4]
        && heads_otm == [2304, 4608, 9216, 18432]
        && speedups == ["8.1x", "4.1x", "2.0x", "1.0x"]
        && in_std == [10368, 18688, 35328, 68608, 135168]
        && in_otm == [8704, 9216, 10240, 12288, 16384]
        && analytic(&ta) == analytic(&tb)
        && elapsed < Duration::from_secs(1);
    report(
        1,
        "attention FLOP tables",
        ok,
        &format!("heads {heads_std:?}/{heads_otm:?} {speedups:?}, inputs {in_std:?}/{in_otm:?}, {elapsed:.2?}"),
    )
}

fn attention_case<T: Real>(c: usize, h: usize, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let sp = StdAttnParams::<T>::random(c, h, rng).unwrap();
    let op = OtmAttnParams::from_standard(&sp);
    let q = Tensor::<T>::rand_uniform(&[c], -1.0, 1.0, rng);
    let k = Tensor::<T>::rand_uniform(&[n, c], -1.0, 1.0, rng);
    let a = standard_cross_attention(&q, &k, &sp).unwrap();
    let b = one_to_many_attention(&q, &k, &op).unwrap();
    a.max_abs_diff(&b)
}

fn c02_attention_equivalence() -> bool {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let c = [8, 32][i % 2];
        let h = [1, 2, 4][(i / 2) % 3];
        let n = [4, 8, 16][(i / 6) % 3];
        e32 = e32.max(attention_case::<f32>(c, h, n, &mut rng));
        e64 = e64.max(attention_case::<f64>(c, h, n, &mut rng));
    }
    let elapsed = t.elapsed();
    report(
        2,
        "folded one-to-many matches standard attention",
        e32 < 1e-5 && e64 < 1e-10 && elapsed < Duration::from_secs(10),
        &format!("max |diff| f32 {e32:.2e}, f64 {e64:.2e}, {elapsed:.2?}"),
    )
}

fn c03_gradient_suite() -> bool {
    let t = Instant::now();
    let o = ldm(&["gradcheck", "--module", "all"]);
    let elapsed = t.elapsed();
    let text = stdout(&o);
    let checks = text.lines().filter(|l| l.contains(" elems ")).count();

    // the harness must notice a sign flip in the compositing backward pass
    fault::set_flip_over_composite(true);
    let mutated = Suite::Ldm.run().unwrap();
    fault::set_flip_over_composite(false);
    let caught = mutated.iter().any(|r| r.name == "over_composite" && !r.passed());

    report(
        3,
        "finite-difference gradient suite",
        o.status.success() && checks > 0 && caught && elapsed < Duration::from_secs(120),
        &format!("{checks} checks, mutation caught: {caught}, {elapsed:.2?}"),
    )
}

fn c04_splat_gather_adjoint() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(4..10), rng.gen_range(4..10));
        let target = Frustum::new(Camera::axis_aligned(Vector3::zeros(), 1.2 * w as f64, w, h), 1.0, 8.0).unwrap();
        let centre = Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.2..0.2));
        let (vh, vw) = (rng.gen_range(5..14), rng.gen_range(5..14));
        let view = Camera::axis_aligned(centre, rng.gen_range(0.8..1.6) * vw as f64, vw, vh);
        let layers = rng.gen_range(1..4);
        let c = rng.gen_range(1..4);
        let d = Tensor::<f64>::from_fn(&[layers, h, w], |_| rng.gen_range(1.5..6.0));
        let p = layer_world_points(&target, &d).unwrap();
        let v = Tensor::<f64>::rand_uniform(&[layers, h, w, c], -1.0, 1.0, &mut rng);
        let u = Tensor::<f64>::rand_uniform(&[vh, vw, c], -1.0, 1.0, &mut rng);
        let pv = splat_project(&v, &view, &p, None).unwrap();
        let (pu, _) = gather_backproject(&u, &view, &p).unwrap();
        let lhs: f64 = (0..layers).map(|l| pv.index0(l).dot(&u)).sum();
        let rhs = v.dot(&pu);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    report(4, "splat is the adjoint of gather", worst < 1e-5, &format!("max rel err {worst:.2e} over 50 instances"))
}

fn c05_ldm_invariant_sweep() -> bool {
    let cfg = ModelConfig::nano();
    let store = network::init_params::<f32>(&cfg, 5).unwrap();
    let last = cfg.shapes().unwrap().pop().unwrap();
    let (l, h, w, c) = last.output;
    let [oh, ow] = cfg.output;
    let target = Frustum::new(Camera::axis_aligned(Vector3::zeros(), ow as f64, ow, oh), cfg.near, cfg.far).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    for i in 0..100 {
        let scale = [0.1, 1.0, 10.0, 100.0][i % 4];
        let mut g = Graph::<f32>::new();
        let v = g.constant(Tensor::rand_uniform(&[l, h, w, c], -scale, scale, &mut rng));
        let deltas = g.constant(Tensor::rand_uniform(&[l * h * w, cfg.views, c], -scale, scale, &mut rng));
        let bl = decode_blend_logits(&mut g, &store, v, deltas).unwrap();
        let wd = g.param(&store, DecodeHeads::DEPTH).unwrap();
        let ws = g.param(&store, DecodeHeads::SIGMA).unwrap();
        let dl = head_logits(&mut g, v, wd).unwrap();
        let sl = head_logits(&mut g, v, ws).unwrap();
        let vars = upsample_activate(&mut g, dl, sl, bl, cfg.upsample, &target).unwrap();
        if let Err(e) = Ldm::from_graph(&g, vars, &target).check_invariants() {
            failures.push(format!("volume {i}: {e}"));
        }
    }
    report(
        5,
        "decoded LDM invariants",
        failures.is_empty(),
        &format!("100 volumes at [{l}, {h}, {w}, {c}], {} failing {:?}", failures.len(), failures.first()),
    )
}

fn fit_bundle(dir: &Path, planes: &str, steps: &str) -> (f64, Duration) {
    let scene = dir.join(format!("scene{planes}"));
    let o = ldm(&["generate-scene", "--seed", "0", "--planes", planes, "--out", scene.to_str().unwrap()]);
    assert!(o.status.success());
    let (out, rep) = (dir.join(format!("fit{planes}.qntc")), dir.join(format!("fit{planes}.csv")));
    let t = Instant::now();
    let o = ldm(&[
        "fit-ldm",
        "--scene",
        scene.to_str().unwrap(),
        "--layers",
        "2",
        "--steps",
        steps,
        "--out",
        out.to_str().unwrap(),
        "--report",
        rep.to_str().unwrap(),
    ]);
    let elapsed = t.elapsed();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(rep).unwrap();
    let worst = text
        .lines()
        .filter(|l| l.starts_with("# psnr_db"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    (worst, elapsed)
}

fn c06_representation_fit() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let (p1, t1) = fit_bundle(dir.path(), "1", "400");
    let (p2, t2) = fit_bundle(dir.path(), "2", "800");
    let limit = Duration::from_secs(180);
    report(
        6,
        "direct LDM fit reaches the PSNR targets",
        p1 >= 35.0 && p2 >= 30.0 && t1 < limit && t2 < limit,
        &format!("single plane {p1:.2} dB in {t1:.1?}, two planes {p2:.2} dB in {t2:.1?}; worst training view"),
    )
}

fn train_losses(dir: &Path, name: &str, extra: &[&str]) -> Vec<f64> {
    let rep = dir.join(name);
    let mut args = vec!["train-nano", "--steps", "500", "--seed", "0", "--report", rep.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = ldm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::read_to_string(rep)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn c07_network_overfit() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let full = train_losses(dir.path(), "full.csv", &[]);
    let zk = train_losses(dir.path(), "zk.csv", &["--zero-keys"]);
    let ratio = full[0] / full[full.len() - 1];

    let model = ModelConfig::nano();
    let scene = TrainScene::<f32>::synthetic(0, fit::TRAIN_BASELINE, &model).unwrap();
    let cfg = FitConfig {
        steps: 3,
        lr: fit::TRAIN_LR,
        ..FitConfig::default()
    };
    let (a, ra) = fit::train_nano(&scene, &model, &cfg).unwrap();
    let (b, rb) = fit::train_nano(&scene, &model, &cfg).unwrap();
    let same = ra.losses == rb.losses && a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.data() == y.data());
    let (f_end, z_end) = (*full.last().unwrap(), *zk.last().unwrap());
    report(
        7,
        "network overfits one scene and cross-attention helps",
        full.len() == 500 && ratio >= 10.0 && z_end > f_end && same,
        &format!("loss {:.4} -> {f_end:.4} (x{ratio:.1}), zero keys end {z_end:.4}, deterministic {same}", full[0]),
    )
}

fn c08_cost_model() -> bool {
    let r = network::op_count_decomposition(&ModelConfig::nano(), 0, &[2, 4, 8]).unwrap();
    report(
        8,
        "forward op count is affine in the view count",
        r.is_exact() && r.per_image > 0 && r.volume_term > 0,
        &format!("T_V {} + M * {}, samples {:?}", r.volume_term, r.per_image, r.samples),
    )
}

fn c09_full_config_shapes() -> bool {
    let shapes = ModelConfig::full().shapes().unwrap();
    let out: Vec<_> = shapes.iter().map(|s| s.output).collect();
    let want = vec![
        (24, 36, 64, 32),
        (24, 36, 64, 32),
        (24, 72, 128, 32),
        (24, 72, 128, 32),
        (12, 144, 256, 32),
        (6, 288, 512, 32),
    ];
    report(9, "full config step shapes", out == want, &format!("{out:?}"))
}

fn container_fixtures() -> Vec<Container> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let specials = [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::MIN_POSITIVE, 1e-310, f64::MAX, -1.5];
    let shapes: [&[usize]; 10] = [&[], &[1], &[0], &[3, 0, 2], &[7], &[2, 3], &[4, 1, 5], &[2, 2, 2, 2], &[1, 1, 1, 1, 1, 9], &[33]];
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut c = Container::new();
            let mut t64 = Tensor::<f64>::rand_uniform(s, -1e3, 1e3, &mut rng);
            for (k, v) in t64.data_mut().iter_mut().enumerate() {
                if k % 3 == 0 {
                    *v = specials[(i + k) % specials.len()];
                }
            }
            c.insert(&format!("entry.{i}.f64"), AnyTensor::F64(t64.clone())).unwrap();
            c.insert(&format!("entry.{i}.f32 ünïcode"), AnyTensor::F32(t64.cast())).unwrap();
            if i % 2 == 0 {
                let nan = Tensor::<f32>::from_fn(&[2], |k| f32::from_bits(0x7fc0_0001 + k as u32));
                c.insert("nan payloads", AnyTensor::F32(nan)).unwrap();
            }
            c
        })
        .collect()
}

fn image_fixtures() -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sizes = [(1, 1, 3), (1, 1, 1), (2, 5, 3), (5, 2, 1), (8, 8, 3), (3, 17, 1), (16, 9, 3), (64, 64, 3), (7, 1, 3), (1, 31, 1)];
    sizes
        .iter()
        .map(|&(h, w, c)| {
            let shape: Vec<usize> = if c == 3 { vec![h, w, 3] } else { vec![h, w] };
            let mut t = Tensor::<f32>::rand_uniform(&shape, -2.0, 2.0, &mut rng);
            if let Some(v) = t.data_mut().first_mut() {
                *v = if c == 3 { f32::INFINITY } else { -0.0 };
            }
            t
        })
        .collect()
}

fn schema_field(e: Error) -> Option<String> {
    match e {
        Error::Schema { field, .. } => Some(field),
        _ => None,
    }
}

fn c10_io_corpus() -> bool {
    let mut roundtrips = 0;
    for c in container_fixtures() {
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        let same = back.len() == c.len()
            && back.entries().iter().zip(c.entries()).all(|(a, b)| a.0 == b.0 && a.1.bits_eq(&b.1))
            && back.to_bytes() == bytes;
        roundtrips += same as usize;
    }
    for img in image_fixtures() {
        let bytes = encode_pfm(&img).unwrap();
        let back = decode_pfm(&bytes).unwrap();
        let same = back.shape() == img.shape()
            && back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            && encode_pfm(&back).unwrap() == bytes;
        roundtrips += same as usize;
    }

    let good = container_fixtures().swap_remove(5).to_bytes();
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let mut bad_dtype = good.clone();
    let dtype_at = 12 + 4 + "entry.5.f64".len();
    bad_dtype[dtype_at] = 7;
    let mut bad_ndim = good.clone();
    bad_ndim[dtype_at + 1] = 200;
    let mut bad_utf8 = good.clone();
    bad_utf8[16] = 0xff;
    let mut trailing = good.clone();
    trailing.push(0);
    let pfm = encode_pfm(&image_fixtures()[2]).unwrap();
    let mut containers: Vec<(&str, Vec<u8>, &str)> = vec![
        ("empty file", vec![], "magic"),
        ("wrong magic", b"QNTX\x01\0\0\0\0\0\0\0".to_vec(), "magic"),
        ("unknown version", bad_version, "version"),
        ("cut in count", good[..10].to_vec(), "entry_count"),
        ("unknown dtype", bad_dtype, "entries[0].dtype"),
        ("too many dims", bad_ndim, "entries[0].ndim"),
        ("bad name", bad_utf8, "entries[0].name"),
        ("cut in data", good[..good.len() - 3].to_vec(), "data"),
        ("trailing byte", trailing, "trailing"),
    ];
    let mut pfms: Vec<(&str, Vec<u8>, &str)> = vec![
        ("pfm magic", b"P6\n1 1\n-1.0\n\0\0\0\0".to_vec(), "pfm.magic"),
        ("pfm width", b"Pf\nx 1\n-1.0\n\0\0\0\0".to_vec(), "pfm.width"),
        ("pfm height", b"Pf\n1\n".to_vec(), "pfm.height"),
        ("pfm scale", b"Pf\n1 1\n0.0\n\0\0\0\0".to_vec(), "pfm.scale"),
        ("pfm short", pfm[..pfm.len() - 1].to_vec(), "pfm.data"),
    ];
    let mut rejected = Vec::new();
    let mut missed = Vec::new();
    for (name, bytes, field) in containers.drain(..) {
        match Container::from_bytes(&bytes).err().and_then(schema_field) {
            Some(f) if f.contains(field) => rejected.push(name),
            other => missed.push(format!("{name}: {other:?}")),
        }
    }
    for (name, bytes, field) in pfms.drain(..) {
        match decode_pfm(&bytes).err().and_then(schema_field) {
            Some(f) if f.contains(field) => rejected.push(name),
            other => missed.push(format!("{name}: {other:?}")),
        }
    }
    let cams = r#"[{"fx": 64, "fy": 64, "cx": 32, "cy": 32, "width": 64, "height": 64,
        "camera_from_world": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1], "near": 2, "far": "12"}]"#;
    let extra = cams.replace("\"near\"", "\"bogus\": 1, \"near\"");
    for (name, text, field) in [("far as string", cams.to_string(), "[0].far"), ("unknown field", extra, "[0]")] {
        match parse_json::<Vec<CameraRecord>>(&text, "cameras.json").err().and_then(schema_field) {
            Some(f) if f.starts_with("cameras.json") && f.contains(field) => rejected.push(name),
            other => missed.push(format!("{name}: {other:?}")),
        }
    }

    // a bundle whose camera disagrees with its image
    let dir = tempfile::tempdir().unwrap();
    let o = ldm(&["generate-scene", "--views", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let mut b = SceneBundle::read(dir.path()).unwrap();
    b.cameras[1].width = 63;
    match b.validate().err().and_then(schema_field) {
        Some(f) if f == "view_001.pfm" => rejected.push("camera/image size"),
        other => missed.push(format!("camera/image size: {other:?}")),
    }

    report(
        10,
        "formats round-trip and malformed inputs are rejected by field",
        roundtrips == 20 && missed.is_empty(),
        &format!("{roundtrips}/20 round-trips, {} malformed rejected, missed {missed:?}", rejected.len()),
    )
}

fn main() {
    let checks: [(u32, fn() -> bool); 10] = [
        (1, c01_flop_tables),
        (2, c02_attention_equivalence),
        (3, c03_gradient_suite),
        (4, c04_splat_gather_adjoint),
        (5, c05_ldm_invariant_sweep),
        (6, c06_representation_fit),
        (7, c07_network_overfit),
        (8, c08_cost_model),
        (9, c09_full_config_shapes),
        (10, c10_io_corpus),
    ];
    let mut failed = 0;
    for (n, check) in checks {
        match std::panic::catch_unwind(check) {
            Ok(true) => {}
            Ok(false) => failed += 1,
            Err(_) => {
                println!("criterion {n:>2} FAIL: panicked");
                failed += 1;
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
