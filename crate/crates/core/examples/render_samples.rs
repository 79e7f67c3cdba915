//! Renders several prior samples of a held-out scene from two context views:
//! one PNG strip per sample (context views, then novel views), plus the
//! per-pixel spread across samples.
//!
//! `cargo run --release --example render_samples -- [checkpoint] [out_dir]`
//!
//! Without a checkpoint a smoke model is trained for a few steps first.

use std::path::PathBuf;

use lasernv::checkpoint::Checkpoint;
use lasernv::config::Config;
use lasernv::data::{generate_dataset, quantize, write_png, ViewSpec};
use lasernv::eval::{LatentSource, SceneRenderer};
use lasernv::model::RenderOpts;
use lasernv::training::Trainer;

fn main() -> lasernv::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, params, cfg) = match args.next() {
        Some(path) => {
            let c = Checkpoint::load(path.as_ref())?;
            let (m, p) = c.model()?;
            (m, p, c.config)
        }
        None => {
            let mut cfg = Config::preset("smoke")?;
            cfg.train.steps = 40;
            let mut t = Trainer::new(cfg)?;
            t.run(&generate_dataset(0, 10, 6, ViewSpec::square(8))?, |_, _| Ok(()))?;
            (t.model, t.params, t.cfg)
        }
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "samples".into()));
    std::fs::create_dir_all(&out).map_err(|e| lasernv::Error::io(&out, e))?;

    let size = if cfg.model.encoder.levels > 3 { 32 } else { 8 };
    let held = generate_dataset(1234, 1, 6, ViewSpec::square(size))?;
    let scene = &held.scenes[0];
    let context = [0, 1];
    let opts = RenderOpts { n_coarse: cfg.train.n_coarse, n_fine: cfg.train.n_fine };
    let r = SceneRenderer::new(&model, &params, scene, &context, opts);
    let views: Vec<usize> = (0..scene.views.len()).collect();

    let n_samples = 4;
    let mut all = Vec::new();
    for s in 0..n_samples {
        let mut strip = Vec::new();
        for &v in &views {
            strip.push(r.render(&scene.views[v].camera, LatentSource::Prior, s as u64, 0)?.rgb);
        }
        write_png(&out.join(format!("sample{s}.png")), size * views.len(), size, &tile(&strip, size))?;
        all.push(strip);
    }
    let truth: Vec<Vec<f32>> = views.iter().map(|&v| scene.views[v].image_f32()).collect();
    write_png(&out.join("ground_truth.png"), size * views.len(), size, &tile(&truth, size))?;

    for &v in &views {
        let n = all[0][v].len();
        let var: f64 = (0..n)
            .map(|i| {
                let xs: Vec<f64> = all.iter().map(|s| s[v][i] as f64).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
            })
            .sum::<f64>()
            / n as f64;
        let role = if context.contains(&v) { "context" } else { "novel" };
        println!("view {v} ({role}): mean variance across {n_samples} samples {var:.2e}");
    }
    println!("wrote {n_samples} sample strips and the ground truth to {}", out.display());
    Ok(())
}

/// Places square RGB images side by side.
fn tile(images: &[Vec<f32>], size: usize) -> Vec<u8> {
    let mut px = Vec::with_capacity(images.len() * size * size * 3);
    for row in 0..size {
        for img in images {
            px.extend(img[row * size * 3..(row + 1) * size * 3].iter().map(|&v| quantize(v as f64)));
        }
    }
    px
}
