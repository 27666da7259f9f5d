use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ldm_core::attention::flops;
use ldm_core::error::{Error, Result};
use ldm_core::fit::{self, FitConfig, FitProblem, TrainScene};
use ldm_core::gradcheck::Suite;
use ldm_core::io::bundle::SceneBundle;
use ldm_core::io::image::{write_pfm, write_ppm};
use ldm_core::io::{self as lio, container::Container};
use ldm_core::ldm::{render_depth, render_ldm, render_ldm_to_camera, Ldm};
use ldm_core::network::{self, ModelConfig};
use ldm_core::scenes::RigSpec;
use ldm_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "ldm", version, about = "Layered depth map fitting, rendering and network tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded plane scene from a camera rig into a bundle directory.
    GenerateScene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        planes: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 0.1, value_parser = positive)]
        baseline: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an LDM directly to a bundle by gradient descent.
    FitLdm {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// View whose frustum holds the LDM.
        #[arg(long, default_value_t = 0)]
        target_index: usize,
        /// JSON file with optimizer settings; `--steps` overrides its step count.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a fitted LDM into one of the bundle's cameras.
    Render {
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera_index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Composited depth, only for the LDM's own camera.
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Print the attention cost tables (analytic FLOPs plus measured time).
    BenchAttention {
        #[arg(long, default_value_t = 32)]
        dk: u64,
        #[arg(long, value_enum)]
        sweep: Option<Sweep>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Skip the wall-clock measurement.
        #[arg(long)]
        no_timing: bool,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Run the network forward with seeded weights and write its outputs.
    ForwardDemo {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Parameters to load instead of the seeded initialization.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Overfit the network on one synthetic scene.
    TrainNano {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = fit::TRAIN_LR)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = fit::TRAIN_BASELINE, value_parser = positive)]
        baseline: f64,
        /// Disable cross-attention keys in every fusion block.
        #[arg(long)]
        zero_keys: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Heads,
    Inputs,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and > 0, got {s}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateScene {
            seed,
            planes,
            views,
            baseline,
            out,
        } => {
            let rig = RigSpec {
                baseline,
                ..RigSpec::small(views)
            };
            rig.validate()?;
            SceneBundle::generate(seed, planes, &rig)?.write(&out)?;
            println!("wrote {views} views to {}", out.display());
            Ok(())
        }
        Command::FitLdm {
            scene,
            layers,
            steps,
            out,
            report,
            target_index,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => lio::parse_json::<FitConfig>(&lio::read_text(&p)?, &p.display().to_string())?,
                None => FitConfig::default(),
            };
            cfg.steps = steps;
            let bundle = SceneBundle::read(&scene)?;
            bundle.validate()?;
            let fr = bundle.frustums()?;
            let t = fr.get(target_index).ok_or_else(|| {
                Error::contract(format!("target index {target_index} out of range for {} views", fr.len()))
            })?;
            let problem = FitProblem::leave_one_out(
                bundle.images_as::<f32>(),
                bundle.camera_list()?,
                t.near,
                t.far,
                target_index,
            )?;
            let (ldm, rep) = fit::fit_raw_ldm(&problem, layers, &cfg)?;
            lio::save_ldm(&out, &ldm)?;
            if let Some(r) = report {
                lio::write_bytes(&r, rep.to_csv().as_bytes())?;
            }
            if let (Some(a), Some(b)) = (rep.initial_loss(), rep.final_loss()) {
                println!("loss {a:.6} -> {b:.6} over {} steps", rep.losses.len());
            }
            for (name, p) in &rep.psnr {
                println!("psnr {name} {p:.2} dB");
            }
            println!("coverage {:.4}  time {:.1}s", rep.coverage, rep.seconds);
            Ok(())
        }
        Command::Render {
            ldm,
            scene,
            camera_index,
            out,
            depth,
        } => {
            let ldm: Ldm<f32> = lio::load_ldm(&ldm)?;
            let bundle = SceneBundle::read(&scene)?;
            bundle.validate()?;
            if ldm.views() != bundle.cameras.len() {
                return Err(Error::contract(format!(
                    "LDM blends {} views but the bundle has {}",
                    ldm.views(),
                    bundle.cameras.len()
                )));
            }
            let cams = bundle.camera_list()?;
            let cam = cams.get(camera_index).ok_or_else(|| {
                Error::contract(format!("camera index {camera_index} out of range for {} views", cams.len()))
            })?;
            let images = bundle.images_as::<f32>();
            let own = *cam == ldm.frustum.camera;
            if depth.is_some() && !own {
                return Err(Error::contract("depth output is only available at the LDM's own camera"));
            }
            let img = if own {
                render_ldm(&ldm, &images, &cams, Some(camera_index))?
            } else {
                render_ldm_to_camera(&ldm, &images, &cams, cam, Some(camera_index))?
            };
            write_pfm(&out, &img)?;
            if let Some(d) = depth {
                write_pfm(&d, &render_depth(&ldm)?)?;
            }
            Ok(())
        }
        Command::BenchAttention {
            dk,
            sweep,
            csv,
            no_timing,
        } => bench_attention(dk, sweep, csv.as_deref(), !no_timing),
        Command::Gradcheck { module } => {
            let suites = Suite::parse(&module).ok_or_else(|| {
                Error::config(format!(
                    "unknown module {module:?}; expected all, core, geometry, ldm, attention or network"
                ))
            })?;
            let mut failed = Vec::new();
            for s in suites {
                println!("[{}]", s.name());
                for r in s.run()? {
                    println!("{r}");
                    if !r.passed() {
                        failed.push(r.to_string());
                    }
                }
            }
            if failed.is_empty() {
                println!("all gradient checks passed");
                Ok(())
            } else {
                Err(Error::GradCheck(format!("{} check(s) failed:\n{}", failed.len(), failed.join("\n"))))
            }
        }
        Command::ForwardDemo {
            scene,
            config,
            seed,
            out,
            params,
        } => forward_demo(&scene, config.as_deref(), seed, &out, params.as_deref()),
        Command::TrainNano {
            config,
            steps,
            lr,
            seed,
            baseline,
            zero_keys,
            report,
            out,
        } => {
            let mut model = load_model(config.as_deref())?;
            model.ablation.zero_keys |= zero_keys;
            let cfg = FitConfig {
                steps,
                lr,
                seed,
                ..FitConfig::default()
            };
            let scene = TrainScene::<f32>::synthetic(seed, baseline, &model)?;
            let (store, rep) = fit::train_nano(&scene, &model, &cfg)?;
            if let Some(r) = report {
                lio::write_bytes(&r, rep.to_csv().as_bytes())?;
            }
            if let Some(o) = out {
                lio::params_to_container(&store).write(&o)?;
            }
            let (a, b) = (rep.initial_loss().unwrap_or(f64::NAN), rep.final_loss().unwrap_or(f64::NAN));
            println!("loss {a:.6} -> {b:.6} (ratio {:.2}) over {steps} steps", a / b);
            println!("final psnr {:.2} dB  time {:.1}s", rep.final_psnr().unwrap_or(f64::NAN), rep.seconds);
            Ok(())
        }
    }
}

fn load_model(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_json(&lio::read_text(p)?),
        None => Ok(ModelConfig::nano()),
    }
}

fn bench_attention(dk: u64, sweep: Option<Sweep>, csv: Option<&Path>, timing: bool) -> Result<()> {
    const QUERIES: usize = 2000;
    let mut csv_text = String::new();
    if sweep != Some(Sweep::Inputs) {
        let n = 8;
        let mut rows = flops::heads_sweep(n, dk)?;
        if timing {
            for r in &mut rows {
                r.seconds = Some(flops::time_per_query(n as usize, r.heads as usize, dk as usize, QUERIES)?);
            }
        }
        println!("{}", flops::heads_table_text(&rows, n, dk));
        csv_text += &flops::heads_table_csv(&rows);
    }
    if sweep != Some(Sweep::Heads) {
        let h = 4;
        let mut rows = flops::inputs_sweep(h, dk)?;
        if timing {
            for r in &mut rows {
                r.seconds = Some(flops::time_per_query(r.inputs as usize, h as usize, dk as usize, QUERIES)?);
            }
        }
        println!("{}", flops::inputs_table_text(&rows, h, dk));
        csv_text += &flops::inputs_table_csv(&rows);
    }
    if let Some(p) = csv {
        lio::write_bytes(p, csv_text.as_bytes())?;
    }
    Ok(())
}

fn forward_demo(scene: &Path, config: Option<&Path>, seed: u64, out: &Path, params: Option<&Path>) -> Result<()> {
    let cfg = load_model(config)?;
    cfg.validate()?;
    let bundle = SceneBundle::read(scene)?;
    bundle.validate()?;
    if bundle.cameras.len() != cfg.views {
        return Err(Error::config(format!(
            "config expects {} views, bundle has {}",
            cfg.views,
            bundle.cameras.len()
        )));
    }
    let [h, w] = cfg.image;
    if let Some((i, c)) = bundle.cameras.iter().enumerate().find(|(_, c)| [c.height, c.width] != [h, w]) {
        return Err(Error::config(format!(
            "config image is {h}x{w} (height x width), camera {i} is {}x{}",
            c.height, c.width
        )));
    }
    let frustums = bundle.frustums()?;
    let [oh, ow] = cfg.output;
    let target = ldm_core::geometry::Frustum::new(frustums[0].camera.resized(ow, oh), cfg.near, cfg.far)?;
    let mut store = network::init_params::<f32>(&cfg, seed)?;
    if let Some(p) = params {
        lio::load_params_into(&mut store, &Container::read(p)?)?;
    }
    let cams = bundle.camera_list()?;
    let (g, o, img) = network::predict(&store, &cfg, &bundle.images_as::<f32>(), &cams, &target)?;
    let ldm = Ldm::from_graph(&g, o.ldm, &target);
    ldm.check_invariants()?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rendered = g.value(img).clone();
    write_pfm(&out.join("target.pfm"), &rendered)?;
    write_ppm(&out.join("target.ppm"), &rendered)?;
    let depth = render_depth(&ldm)?;
    write_pfm(&out.join("depth.pfm"), &depth)?;
    for l in 0..ldm.layers() {
        let plane = oh * ow;
        let sigma = Tensor::from_fn(&[oh, ow, 3], |i| ldm.density.data()[l * plane + i / 3]);
        write_pfm(&out.join(format!("sigma_{l:02}.pfm")), &sigma)?;
        write_ppm(&out.join(format!("sigma_{l:02}.ppm")), &sigma)?;
    }
    lio::save_ldm(&out.join("ldm.qntc"), &ldm)?;
    let counts = network::op_count_decomposition(&cfg, seed, &[2, 4, 8])?;
    lio::write_bytes(&out.join("op_counts.csv"), counts.to_text().as_bytes())?;
    print!("{}", counts.to_text());
    println!("ops at M = {}: {}", cfg.views, g.op_count());
    println!("wrote {} layers to {}", ldm.layers(), out.display());
    Ok(())
}
