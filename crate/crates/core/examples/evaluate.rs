//! Scores a model on held-out scenes: PSNR and SSIM on context and novel
//! views, the importance-weighted likelihood, and sample diversity.
//!
//! `cargo run --release --example evaluate -- [checkpoint] [scenes]`
//!
//! Without a checkpoint a smoke model is trained for a few steps first.

use lasernv::checkpoint::Checkpoint;
use lasernv::config::Config;
use lasernv::data::{generate_dataset, ViewSpec};
use lasernv::eval::{evaluate, EvalOptions};
use lasernv::model::RenderOpts;
use lasernv::training::Trainer;

fn main() -> lasernv::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, params, cfg) = match args.next().filter(|a| a != "-") {
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
    let scenes = args.next().map_or(4, |s| s.parse().expect("scene count"));
    // SSIM needs at least 11x11 pixels; 16 also suits the smoke encoder.
    let size = if cfg.model.encoder.levels > 3 { 32 } else { 16 };
    let data = generate_dataset(4321, scenes, 6, ViewSpec::square(size))?;
    let o = EvalOptions {
        n_context: cfg.train.n_context,
        n_target: 2,
        n_samples: 10,
        render: RenderOpts { n_coarse: cfg.train.n_coarse, n_fine: cfg.train.n_fine },
        likelihood_std: cfg.train.likelihood_std,
        seed: 0,
    };
    let report = evaluate(&model, &params, &data, &o)?;
    for s in &report.scenes {
        println!(
            "{}: context {:.2} dB, novel {:.2} dB, log-lik {}",
            s.scene,
            s.context.psnr,
            s.target.psnr,
            s.iw_loglik.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
    }
    let g = &report.aggregate;
    println!(
        "{} ({} scenes): context PSNR {:.2} / SSIM {:.3}, novel PSNR {:.2} / SSIM {:.3}, diversity observed {:.2e} unobserved {:.2e}",
        report.variant,
        report.n_scenes,
        g.context_psnr,
        g.context_ssim.unwrap_or(f64::NAN),
        g.target_psnr,
        g.target_ssim.unwrap_or(f64::NAN),
        g.observed_var,
        g.unobserved_var
    );
    Ok(())
}
