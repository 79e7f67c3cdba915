//! Trains a model on freshly generated scenes, with checkpoints and a
//! metrics log in the output directory. Rerun with `resume` to continue.
//!
//! `cargo run --release --example train_micro -- [preset] [steps] [out_dir] [resume]`
//!
//! The `smoke` preset (8x8 images) finishes in a minute; `micro` (32x32)
//! is the desk-scale setting and needs about an hour for 5000 steps.

use std::path::PathBuf;

use lasernv::config::Config;
use lasernv::data::{generate_dataset, ViewSpec};
use lasernv::run::{self, RunDir};

fn main() -> lasernv::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "smoke".into());
    let steps: u64 = args.next().map_or(200, |s| s.parse().expect("step count"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| format!("run-{preset}")));
    let resume = args.next().as_deref() == Some("resume");

    let mut cfg = Config::preset(&preset)?;
    cfg.train.steps = steps;
    let size = if preset == "smoke" { 8 } else { 32 };
    let data = generate_dataset(0, 20, 8, ViewSpec::square(size))?;
    let every = cfg.train.log_every.max(1);
    let t = run::train(cfg, &data, &RunDir::new(&out), resume, |r| {
        if r.step % every == 0 {
            println!("step {:>5}  elbo {:>8.4}  kl {:.5}  beta {:.2}  |g| {:.3}", r.step, r.elbo, r.kl, r.beta, r.grad_norm);
        }
    })?;
    println!("{} parameters trained for {} steps; checkpoint in {}", t.params.numel(), t.step, out.display());
    Ok(())
}
