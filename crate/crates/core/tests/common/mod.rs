//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use lasernv::config::Config;
use lasernv::data::{generate_dataset, SceneDataset, ViewSpec};
use lasernv::model::{Model, Variant};
use lasernv::nn::jitter;
use lasernv::model::DepthPlan;
use lasernv::scenefn::BackgroundKind;
use lasernv::training::{elbo_loss, sample_batch, Batch};
use lasernv_tensor::{ParamTree, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The smoke preset with `variant` swapped in and a background it supports.
pub fn smoke_config(variant: Variant) -> Config {
    let mut cfg = Config::preset("smoke").unwrap();
    cfg.model.variant = variant;
    if matches!(variant, Variant::CondNerfVae | Variant::NerfVae) {
        cfg.model.background = BackgroundKind::Mlp;
    }
    cfg
}

pub fn tiny_data(seed: u64, scenes: usize, views: usize) -> SceneDataset {
    generate_dataset(seed, scenes, views, ViewSpec::square(8)).unwrap()
}

#[derive(Debug)]
pub struct GradCheck {
    pub coordinates: usize,
    pub worst_rel: f64,
    pub worst_param: String,
    pub directional_rel: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the analytic ELBO gradient in f64 against central differences,
/// at the largest-gradient coordinate of every parameter tensor and along
/// one random direction. Sample depths are replayed so the loss is smooth.
pub fn elbo_gradcheck(cfg: &Config, data: &SceneDataset, seed: u64) -> GradCheck {
    let (model, params) = Model::build(&cfg.model, seed).unwrap();
    let mut params = params;
    // Zero-initialized heads would make many gradients trivially zero.
    jitter(&mut params, 0.05, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let p64: ParamTree<f64> = params.cast();
    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Batch = sample_batch(data, tc, &mut rng).unwrap();
    let loss_seed: u64 = rng.random();
    let beta = 0.7;

    let (plans, grads): (Vec<DepthPlan>, ParamTree<f64>) = {
        let tape = Tape::with_params(&p64);
        let loss = elbo_loss(&model, &tape, data, &batch, tc, beta, loss_seed, None).unwrap();
        let g = loss.total.backward();
        let mut grads = p64.clone();
        grads.zero_grads();
        for (id, t) in g.params() {
            *grads.grad_mut(id) = t.clone();
        }
        (loss.plans, grads)
    };
    let eval = |p: &ParamTree<f64>| -> f64 {
        let tape = Tape::with_params(p);
        elbo_loss(&model, &tape, data, &batch, tc, beta, loss_seed, Some(&plans)).unwrap().total.item()
    };

    let h = 1e-6;
    let mut worst = (0.0, String::new());
    let mut coordinates = 0;
    let ids: Vec<_> = p64.ids().collect();
    for &id in &ids {
        let g = grads.grad(id).data();
        let (k, &gk) = g.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        if gk.abs() < 1e-9 {
            continue;
        }
        let mut p = p64.clone();
        let x0 = p.value(id).data()[k];
        p.value_mut(id).data_mut()[k] = x0 + h;
        let up = eval(&p);
        p.value_mut(id).data_mut()[k] = x0 - h;
        let down = eval(&p);
        let fd = (up - down) / (2.0 * h);
        let r = rel(gk, fd);
        coordinates += 1;
        if r > worst.0 {
            worst = (r, format!("{}[{k}]: analytic {gk:.6e} fd {fd:.6e}", p64.name(id)));
        }
    }

    let mut dir_rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let dirs: Vec<Vec<f64>> =
        ids.iter().map(|&id| (0..p64.value(id).numel()).map(|_| dir_rng.random_range(-1.0..1.0)).collect()).collect();
    let analytic: f64 = ids.iter().zip(&dirs).map(|(&id, d)| grads.grad(id).data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum();
    let shifted = |s: f64| {
        let mut p = p64.clone();
        for (&id, d) in ids.iter().zip(&dirs) {
            p.value_mut(id).data_mut().iter_mut().zip(d).for_each(|(x, v)| *x += s * v);
        }
        eval(&p)
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    GradCheck { coordinates, worst_rel: worst.0, worst_param: worst.1, directional_rel: rel(analytic, fd) }
}
