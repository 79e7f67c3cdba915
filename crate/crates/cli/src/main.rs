//! `lasernv`: generate MiniCity data, train, render and evaluate.
//!
//! Exit codes: 0 ok, 2 usage or config error, 3 data or I/O error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lasernv::checkpoint::Checkpoint;
use lasernv::config::Config;
use lasernv::data::{self, generate_dataset, orbit, quantize, read_cameras, read_dataset, write_dataset, ViewSpec};
use lasernv::eval::{evaluate, EvalOptions, LatentSource, SceneRenderer};
use lasernv::geometry::Camera;
use lasernv::model::RenderOpts;
use lasernv::run::{self, RunDir};
use lasernv::{Error, Result};

/// Image sizes must divide by the coarsest encoder stride the presets use.
const SIZE_MULTIPLE: usize = 8;

#[derive(Parser)]
#[command(name = "lasernv", version, about = "Set-latent generative radiance fields on MiniCity scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a MiniCity RGB-D dataset.
    GenData(GenData),
    /// Train a model, writing checkpoints and a metrics log to --out.
    Train(Train),
    /// Render frames and depth maps of one scene along a camera path.
    Render(Render),
    /// Score a checkpoint on a dataset and write a JSON report.
    Eval(Eval),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 12)]
    views: usize,
    /// Square image size in pixels, a multiple of 8.
    #[arg(long, default_value_t = 32, value_parser = parse_size)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// TOML config; `preset = "micro"` pulls in a shipped preset.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scene id (`scene_0003`) or index.
    #[arg(long)]
    scene: String,
    /// Number of context views, taken from the start of the scene.
    #[arg(long, default_value_t = 2)]
    context: usize,
    /// `orbit:N`, `views`, or a JSON file with a list of cameras.
    #[arg(long, default_value = "orbit:8")]
    camera_path: String,
    /// Latent samples; each gets its own set of frames.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    context: usize,
    #[arg(long, default_value_t = 2)]
    targets: usize,
    /// Importance samples for the likelihood and prior samples for diversity.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n == 0 || n % SIZE_MULTIPLE != 0 {
        return Err(format!("size must be a positive multiple of {SIZE_MULTIPLE}"));
    }
    Ok(n)
}

fn gen_data(a: GenData) -> Result<()> {
    let data = generate_dataset(a.seed, a.scenes, a.views, ViewSpec::square(a.size))?;
    write_dataset(&a.out, &data)?;
    println!("wrote {} scenes x {} views ({}x{}) to {}", a.scenes, a.views, a.size, a.size, a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let data = read_dataset(&a.data)?;
    let every = cfg.train.log_every.max(1);
    let t = run::train(cfg, &data, &RunDir::new(&a.out), a.resume, |r| {
        if r.step % every == 0 {
            println!("step {:>6}  elbo {:>9.4}  recon {:>9.4}  kl {:>8.5}  beta {:.2}", r.step, r.elbo, r.recon_ll, r.kl, r.beta);
        }
    })?;
    println!("finished at step {}; checkpoint in {}", t.step, a.out.display());
    Ok(())
}

fn camera_path(spec: &str, scene: &data::SceneRecord, context: &[Camera]) -> Result<Vec<Camera>> {
    if let Some(n) = spec.strip_prefix("orbit:") {
        let n: usize = n.parse().map_err(|_| Error::config(format!("bad frame count in --camera-path {spec}")))?;
        orbit(&scene.scene, context, n)
    } else if spec == "views" {
        Ok(scene.views.iter().map(|v| v.camera.clone()).collect())
    } else {
        read_cameras(Path::new(spec))
    }
}

fn render(a: Render) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, params) = ckpt.model()?;
    let data = read_dataset(&a.data)?;
    let scene = data
        .scenes
        .iter()
        .find(|s| s.id == a.scene)
        .or_else(|| a.scene.parse::<usize>().ok().and_then(|i| data.scenes.get(i)))
        .ok_or_else(|| Error::config(format!("no scene {} in {}", a.scene, a.data.display())))?;
    if a.context == 0 || a.context > scene.views.len() {
        return Err(Error::config(format!("--context must be in 1..={}", scene.views.len())));
    }
    let context: Vec<usize> = (0..a.context).collect();
    let cams: Vec<Camera> = context.iter().map(|&v| scene.views[v].camera.clone()).collect();
    let path = camera_path(&a.camera_path, scene, &cams)?;
    let tc = &ckpt.config.train;
    let r = SceneRenderer::new(&model, &params, scene, &context, RenderOpts { n_coarse: tc.n_coarse, n_fine: tc.n_fine });
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for s in 0..a.samples.max(1) {
        for (f, cam) in path.iter().enumerate() {
            let img = r.render(cam, LatentSource::Prior, a.seed.wrapping_add(s as u64), a.seed)?;
            let rgb: Vec<u8> = img.rgb.iter().map(|&v| quantize(v as f64)).collect();
            let stem = format!("sample{s:02}_frame{f:03}");
            data::write_png(&a.out.join(format!("{stem}.png")), img.width, img.height, &rgb)?;
            data::write_depth(&a.out.join(format!("{stem}.depth")), img.width, img.height, &img.depth)?;
        }
    }
    println!("rendered {} sample(s) x {} frame(s) of {} to {}", a.samples.max(1), path.len(), scene.id, a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, params) = ckpt.model()?;
    let mut data = read_dataset(&a.data)?;
    if let Some(n) = a.scenes {
        data.scenes.truncate(n);
    }
    let tc = &ckpt.config.train;
    let o = EvalOptions {
        n_context: a.context,
        n_target: a.targets,
        n_samples: a.samples,
        render: RenderOpts { n_coarse: tc.n_coarse, n_fine: tc.n_fine },
        likelihood_std: tc.likelihood_std,
        seed: a.seed,
    };
    let report = evaluate(&model, &params, &data, &o)?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    match &a.out {
        Some(p) => {
            std::fs::write(p, format!("{json}\n")).map_err(|e| Error::io(p, e))?;
            let g = &report.aggregate;
            println!(
                "{} scenes: target PSNR {:.2} dB, context PSNR {:.2} dB; report in {}",
                report.n_scenes,
                g.target_psnr,
                g.context_psnr,
                p.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
