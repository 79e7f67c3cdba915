//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The default tier runs every check, but the two training experiments
//! (criteria 5-7) get a reduced budget so `cargo test` stays short. Set
//! `LASERNV_ACCEPTANCE_FULL=1` for the full budgets (hours on one core).
//! `LASERNV_ACCEPTANCE_DIR` keeps the training runs on disk; interrupted runs
//! resume and finished ones are reused. With `LASERNV_ACCEPTANCE_STRICT=1`
//! any FAIL makes the process exit nonzero.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{elbo_gradcheck, smoke_config, tiny_data};
use lasernv::checkpoint::Checkpoint;
use lasernv::config::Config;
use lasernv::data::{generate_dataset, write_dataset, SceneDataset, ViewSpec};
use lasernv::eval::{diversity_score, psnr, LatentSource, SceneRenderer};
use lasernv::flow::{Direction, FlowConfig, SetFlow};
use lasernv::geometry::Ray;
use lasernv::model::{Depths, Model, RenderOpts, Variant};
use lasernv::nn::{jitter, Builder};
use lasernv::renderer::{composite, composite_ray, midpoint_samples, stratified_samples};
use lasernv::run::{self, RunDir};
use lasernv::scenefn::{BackgroundKind, Latents, SceneCond, ViewMaps};
use lasernv::training::Trainer;
use lasernv_tensor::gradcheck::{max_rel_err, numerical_gradient, numerical_jacobian, rel_err};
use lasernv_tensor::{ParamTree, Tape, Tensor};
use nalgebra::{DMatrix, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Criterion 1.
const FLOW_ROUNDTRIP_TOL: f64 = 1e-10;
const FLOW_LOGDET_TOL: f64 = 1e-4;
const FLOW_PERM_TOL: f64 = 1e-8;
const FLOW_SECONDS: f64 = 60.0;
// Criterion 2.
const WEIGHT_SUM_TOL: f64 = 1e-5;
const HOMOGENEOUS_TOL: f64 = 1e-3;
const RENDER_GRAD_TOL: f64 = 1e-4;
const RENDER_SECONDS: f64 = 120.0;
// Criterion 3.
const SYMMETRY_TOL: f64 = 1e-5;
// Criterion 4.
const ELBO_GRAD_TOL: f64 = 1e-3;
const ELBO_GRAD_SECONDS: f64 = 600.0;
// Criterion 5.
const PSNR_TARGET: f64 = 24.0;
const TRAIN_SECONDS: f64 = 4.0 * 3600.0;
// Criterion 7.
const DIVERSITY_RATIO: f64 = 2.0;

struct Tier {
    full: bool,
    train_steps: u64,
    capacity_steps: u64,
    diversity_scenes: usize,
    diversity_targets: usize,
    dir: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

impl Tier {
    fn from_env() -> Self {
        let full = std::env::var("LASERNV_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
        let (dir, tmp) = match std::env::var("LASERNV_ACCEPTANCE_DIR") {
            Ok(d) => (PathBuf::from(d), None),
            Err(_) => {
                let t = tempfile::tempdir().expect("temp dir");
                (t.path().to_path_buf(), Some(t))
            }
        };
        let train_steps = if full { Config::preset("micro").unwrap().train.steps } else { 150 };
        let capacity_steps = if full { 1000 } else { 150 };
        let (diversity_scenes, diversity_targets) = if full { (10, 6) } else { (3, 2) };
        Self { full, train_steps, capacity_steps, diversity_scenes, diversity_targets, dir, _tmp: tmp }
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flow_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let build = |dim: usize, direction: Direction, seed: u64| {
        let mut params = ParamTree::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig { dim, model_dim: 16, heads: 2, layers: 3, ctx_dim: 6, direction };
        let flow = SetFlow::new(&mut Builder::new(&mut params, &mut r), "flow", cfg);
        jitter(&mut params, 0.05, &mut r);
        (flow, params.cast::<f64>())
    };

    let mut roundtrip: f64 = 0.0;
    let mut perm: f64 = 0.0;
    for (i, direction) in [Direction::Forward, Direction::Inverted].into_iter().enumerate() {
        for seed in 0..5 {
            let (flow, params) = build(8, direction, 10 * i as u64 + seed);
            let tape = Tape::inference(&params);
            let z = tape.constant(gaussian(&[6, 8], &mut rng));
            let ctx = tape.constant(gaussian(&[5, 6], &mut rng));
            let (y, ld) = flow.apply(z, ctx).unwrap();
            let (back, ld_inv) = flow.unapply(y, ctx).unwrap();
            roundtrip = roundtrip.max(back.value().max_abs_diff(&z.value())).max((ld.item() + ld_inv.item()).abs());
            let zp = z.index_select([3, 5, 0, 1, 4, 2].to_vec().into());
            let cp = ctx.index_select([4, 2, 0, 3, 1].to_vec().into());
            let lp = flow.logprob(z, ctx).unwrap().item();
            perm = perm.max((lp - flow.logprob(zp, cp).unwrap().item()).abs());
        }
    }

    let mut logdet: f64 = 0.0;
    for (k, d) in [(1, 2), (1, 4), (2, 2), (2, 4), (3, 2), (3, 4)] {
        let (flow, params) = build(d, Direction::Forward, 50 + (k * d) as u64);
        let ctx = gaussian(&[3, 6], &mut rng);
        let apply = |x: &[f64]| {
            let tape = Tape::inference(&params);
            let (y, ld) = flow.apply(tape.constant(Tensor::new(vec![k, d], x.to_vec())), tape.constant(ctx.clone())).unwrap();
            (y.value().to_f64_vec(), ld.item())
        };
        let z = gaussian(&[k, d], &mut rng).to_f64_vec();
        let jac = numerical_jacobian(&mut |x| apply(x).0, &z, 1e-6);
        let n = k * d;
        let numeric = DMatrix::from_fn(n, n, |i, j| jac[i][j]).determinant().abs().ln();
        logdet = logdet.max(rel_err(apply(&z).1, numeric, 1e-3));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        roundtrip < FLOW_ROUNDTRIP_TOL && logdet < FLOW_LOGDET_TOL && perm < FLOW_PERM_TOL && secs < FLOW_SECONDS,
        format!("roundtrip {roundtrip:.1e}, logdet rel {logdet:.1e}, permutation {perm:.1e}, {secs:.1}s"),
    )
}

fn renderer_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let ray = |near: f64, far: f64| Ray { origin: Point3::origin(), direction: Vector3::z(), t_near: near, t_far: far };

    let (r, s) = (10_000, 32);
    let mut depths = Vec::with_capacity(r * s);
    let mut t_far = Vec::with_capacity(r);
    for _ in 0..r {
        let near = rng.random_range(0.1..2.0);
        let far = near + rng.random_range(0.5..20.0);
        depths.extend(stratified_samples(&ray(near, far), s, &mut rng));
        t_far.push(far);
    }
    let sigma: Vec<f64> = (0..r * s)
        .map(|_| match rng.random_range(0..3) {
            0 => 0.0,
            1 => rng.random_range(0.0..20.0),
            _ => 10f64.powf(rng.random_range(-3.0..4.0)),
        })
        .collect();
    let tape = Tape::<f32>::new();
    let out = composite(
        tape.constant(Tensor::from_f64(vec![r, s], &sigma)),
        tape.constant(Tensor::full(vec![r, s, 3], 0.5)),
        &depths,
        &t_far,
        tape.constant(Tensor::zeros(vec![1, 3])),
    );
    let (w, tf) = (out.weights.value(), out.t_final.value());
    let sum_err = (0..r)
        .map(|i| (w.data()[i * s..(i + 1) * s].iter().map(|&v| v as f64).sum::<f64>() + tf.data()[i] as f64 - 1.0).abs())
        .fold(0.0, f64::max);

    let (near, far) = (0.5, 10.5);
    let mids = midpoint_samples(&ray(near, far), 512);
    let (c, bg) = ([0.8, 0.3, 0.1], [0.1, 0.2, 0.9]);
    let mut homogeneous: f64 = 0.0;
    for sigma in [0.01, 0.1, 0.5, 2.0, 10.0] {
        let out = composite_ray(&mids, &vec![sigma; 512], &vec![c; 512], far, bg);
        let trans = (-sigma * (far - near)).exp();
        for ch in 0..3 {
            let expect = c[ch] * (1.0 - trans) + bg[ch] * trans;
            homogeneous = homogeneous.max((out.color[ch] - expect).abs() / expect);
        }
    }

    let (r, s) = (3, 6);
    let mut depths = Vec::new();
    for _ in 0..r {
        depths.extend(stratified_samples(&ray(1.0, 4.0), s, &mut rng));
    }
    let t_far = vec![4.0; r];
    let (n_sigma, n_rgb) = (r * s, r * s * 3);
    let mut x: Vec<f64> = (0..n_sigma).map(|_| rng.random_range(0.05..3.0)).collect();
    x.extend((0..n_rgb + r * 3).map(|_| rng.random_range(0.0..1.0)));
    let probe: Vec<f64> = (0..r * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |v: &[f64], want_grad: bool| {
        let tape = Tape::<f64>::new();
        let sigma = tape.var(Tensor::new(vec![r, s], v[..n_sigma].to_vec()));
        let rgb = tape.var(Tensor::new(vec![r, s, 3], v[n_sigma..n_sigma + n_rgb].to_vec()));
        let bg = tape.var(Tensor::new(vec![r, 3], v[n_sigma + n_rgb..].to_vec()));
        let out = composite(sigma, rgb, &depths, &t_far, bg);
        let mixed = tape.concat(&[out.color, out.depth.reshape(vec![r, 1])], 1);
        let y = mixed.mul(tape.constant(Tensor::new(vec![r, 4], probe.clone()))).sum();
        let mut grad = Vec::new();
        if want_grad {
            let g = y.backward();
            for v in [sigma, rgb, bg] {
                grad.extend(g.wrt(v).unwrap().to_f64_vec());
            }
        }
        (y.item(), grad)
    };
    let analytic = eval(&x, true).1;
    let numeric = numerical_gradient(&mut |v| eval(v, false).0, &x, 1e-6);
    let grad = max_rel_err(&analytic, &numeric, 1e-6);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        sum_err < WEIGHT_SUM_TOL && homogeneous < HOMOGENEOUS_TOL && grad < RENDER_GRAD_TOL && secs < RENDER_SECONDS,
        format!("sum(w)+T {sum_err:.1e}, homogeneous rel {homogeneous:.1e}, gradient rel {grad:.1e}, {secs:.1}s"),
    )
}

/// Renders rays through the full model (encoder, prior sample, scene
/// function, two-pass renderer), then again with the latent set and the
/// context views permuted, replaying the sample depths.
fn symmetry() -> Outcome {
    let mut worst: f64 = 0.0;
    let backgrounds = [BackgroundKind::Context, BackgroundKind::Latent, BackgroundKind::Constant];
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let mut cfg = smoke_config(Variant::LaserNv).model;
        cfg.latent_k = rng.random_range(2..=5);
        cfg.heads = [1, 2, 4][rng.random_range(0..3)];
        cfg.background = backgrounds[trial as usize % 3];
        let n_views = rng.random_range(2..=3);
        let (model, mut params) = Model::build(&cfg, trial).unwrap();
        jitter(&mut params, 0.1, &mut rng);
        let params: ParamTree<f64> = params.cast();
        let data = generate_dataset(trial, 1, n_views + 1, ViewSpec::square(8)).unwrap();
        let scene = &data.scenes[0];
        let target = &scene.views[n_views].camera;
        let rays: Vec<Ray> = (0..16).map(|i| target.pixel_center_ray(i % 8, (i * 3) % 8)).collect();
        let opts = RenderOpts { n_coarse: 6, n_fine: 6 };

        let render = |order: &[usize], perm: Option<&[usize]>, plan: Option<&lasernv::model::DepthPlan>| {
            let tape = Tape::inference(&params);
            let images: Vec<Vec<f32>> = order.iter().map(|&v| scene.views[v].image_f32()).collect();
            let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
            let cams: Vec<_> = order.iter().map(|&v| scene.views[v].camera.clone()).collect();
            let pyramid = model.encode(&tape, &refs, &cams).unwrap();
            let draw = model.sample_latents(&model.prior, &pyramid, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().unwrap();
            let z = match perm {
                Some(p) => draw.z.index_select(p.to_vec().into()),
                None => draw.z,
            };
            let cond = model.condition(&pyramid, &cams, Latents::Set(z));
            let mut ray_rng = ChaCha8Rng::seed_from_u64(10);
            let depths = match plan {
                Some(p) => Depths::Fixed(p),
                None => Depths::Draw(&mut ray_rng),
            };
            let out = model.render_rays(&cond, &rays, opts, depths).unwrap();
            (out.output().color.value().to_f64_vec(), out.plan)
        };
        let identity: Vec<usize> = (0..n_views).collect();
        let (base, plan) = render(&identity, None, None);
        let mut order = identity.clone();
        order.rotate_left(1);
        order.swap(0, n_views - 1);
        let mut perm: Vec<usize> = (0..cfg.latent_k).collect();
        perm.reverse();
        perm.rotate_left(1);
        let (other, _) = render(&order, Some(&perm), Some(&plan));
        worst = worst.max(max_diff(&base, &other));
    }
    outcome(worst <= SYMMETRY_TOL, format!("max pixel change {worst:.1e} over 10 configs"))
}

fn elbo_gradient() -> Outcome {
    let start = Instant::now();
    let cfg = smoke_config(Variant::LaserNv);
    let data = tiny_data(400, 2, 4);
    let g = elbo_gradcheck(&cfg, &data, 401);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        g.worst_rel < ELBO_GRAD_TOL && g.directional_rel < ELBO_GRAD_TOL && secs < ELBO_GRAD_SECONDS,
        format!(
            "{} coordinates, worst rel {:.1e} ({}), random direction rel {:.1e}, {secs:.1}s",
            g.coordinates, g.worst_rel, g.worst_param, g.directional_rel
        ),
    )
}

fn micro_config(variant: Variant, steps: u64) -> Config {
    let mut cfg = Config::preset("micro").unwrap();
    cfg.model.variant = variant;
    if !matches!(variant, Variant::LaserNv | Variant::LaserNoGeom | Variant::Mvcn) {
        cfg.model.background = BackgroundKind::Mlp;
    }
    cfg.train.steps = steps;
    cfg
}

/// Trains in `dir`, reusing or resuming a run left there earlier.
fn train_cached(cfg: Config, data: &SceneDataset, dir: PathBuf) -> (Trainer, f64) {
    let start = Instant::now();
    let rd = RunDir::new(dir);
    let resume = Checkpoint::load(&rd.checkpoint()).is_ok_and(|c| c.config.model == cfg.model && c.step <= cfg.train.steps);
    let seconds_before: f64 = if resume { rd.read_metrics().unwrap_or_default().iter().map(|r| r.seconds).sum() } else { 0.0 };
    let t = run::train(cfg, data, &rd, resume, |r| {
        if r.step % 250 == 0 {
            eprintln!("  [{}] step {} elbo {:.3} kl {:.4}", rd.root.display(), r.step, r.elbo, r.kl);
        }
    })
    .unwrap();
    let logged: f64 = rd.read_metrics().unwrap().iter().map(|r| r.seconds).sum();
    (t, logged.max(seconds_before).max(start.elapsed().as_secs_f64()))
}

/// Mean PSNR of held-out scenes' context views rendered from a prior sample.
fn context_psnr(t: &Trainer, held: &SceneDataset) -> f64 {
    let tc = &t.cfg.train;
    let opts = RenderOpts { n_coarse: tc.n_coarse, n_fine: tc.n_fine };
    let context: Vec<usize> = (0..tc.n_context).collect();
    let mut scores = Vec::new();
    for (i, s) in held.scenes.iter().enumerate() {
        let r = SceneRenderer::new(&t.model, &t.params, s, &context, opts);
        for &v in &context {
            let img = r.render(&s.views[v].camera, LatentSource::Prior, i as u64, 7).unwrap();
            scores.push(psnr(&img.rgb, &s.views[v].image_f32()).min(100.0));
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

struct Trained {
    laser: Trainer,
    held: SceneDataset,
}

fn training_smoke(tier: &Tier) -> (Outcome, Trained) {
    let data = generate_dataset(500, 20, 8, ViewSpec::square(32)).unwrap();
    let held = generate_dataset(501, 10, 8, ViewSpec::square(32)).unwrap();
    let (laser, laser_secs) = train_cached(micro_config(Variant::LaserNv, tier.train_steps), &data, tier.dir.join("c5-laser-nv"));
    let (vae, vae_secs) = train_cached(micro_config(Variant::CondNerfVae, tier.train_steps), &data, tier.dir.join("c5-cond-nerf-vae"));
    let (p_laser, p_vae) = (context_psnr(&laser, &held), context_psnr(&vae, &held));
    let secs = laser_secs + vae_secs;
    let o = outcome(
        p_laser >= PSNR_TARGET && p_laser > p_vae && laser_secs <= TRAIN_SECONDS,
        format!(
            "{} steps: laser-nv {p_laser:.2} dB vs cond-nerf-vae {p_vae:.2} dB (target {PSNR_TARGET}), laser-nv {:.0} min, total {:.0} min",
            tier.train_steps,
            laser_secs / 60.0,
            secs / 60.0
        ),
    );
    (o, Trained { laser, held })
}

/// Mean ELBO over the last fifth of a run.
fn final_elbo(records: &[lasernv::training::StepRecord]) -> f64 {
    let tail = &records[records.len() - (records.len() / 5).max(1)..];
    tail.iter().map(|r| r.elbo).sum::<f64>() / tail.len() as f64
}

fn capacity(tier: &Tier) -> Outcome {
    // The full tier uses the micro model and dataset; the quick tier an 8x8 smoke model.
    let (data, base) = if tier.full {
        (generate_dataset(500, 20, 8, ViewSpec::square(32)).unwrap(), micro_config(Variant::LaserNv, tier.capacity_steps))
    } else {
        let mut c = smoke_config(Variant::LaserNv);
        c.train.steps = tier.capacity_steps;
        (tiny_data(500, 20, 8), c)
    };
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut elbo = [0.0; 2];
        for (slot, k) in [1usize, 8].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.model.latent_k = k;
            cfg.train.seed = seed;
            let dir = tier.dir.join(format!("c6-{}-k{k}-s{seed}", if tier.full { "micro" } else { "smoke" }));
            train_cached(cfg, &data, dir.clone());
            elbo[slot] = final_elbo(&RunDir::new(dir).read_metrics().unwrap());
        }
        if elbo[1] >= elbo[0] {
            wins += 1;
        }
        lines.push(format!("seed {seed}: K=1 {:.3} K=8 {:.3}", elbo[0], elbo[1]));
    }
    outcome(wins >= 2, format!("{} steps, final train ELBO; {}; K=8 ahead in {wins}/3", tier.capacity_steps, lines.join(", ")))
}

fn diversity(tier: &Tier, trained: &Trained) -> Outcome {
    let t = &trained.laser;
    let tc = &t.cfg.train;
    let opts = RenderOpts { n_coarse: tc.n_coarse, n_fine: tc.n_fine };
    let context: Vec<usize> = (0..tc.n_context).collect();
    let targets: Vec<usize> = (tc.n_context..tc.n_context + tier.diversity_targets).collect();
    let (mut obs, mut unobs, mut n_obs, mut n_unobs) = (0.0, 0.0, 0usize, 0usize);
    for (i, s) in trained.held.scenes.iter().take(tier.diversity_scenes).enumerate() {
        let r = SceneRenderer::new(&t.model, &t.params, s, &context, opts);
        let d = diversity_score(&r, &targets, 10, i as u64).unwrap();
        obs += d.observed_var * d.observed_px as f64;
        unobs += d.unobserved_var * d.unobserved_px as f64;
        n_obs += d.observed_px;
        n_unobs += d.unobserved_px;
    }
    let (obs, unobs) = (obs / n_obs.max(1) as f64, unobs / n_unobs.max(1) as f64);

    let (model, mut params) = Model::build(&micro_config(Variant::Mvcn, 1).model, 5).unwrap();
    jitter(&mut params, 0.1, &mut ChaCha8Rng::seed_from_u64(6));
    let s = &trained.held.scenes[0];
    let r = SceneRenderer::new(&model, &params, s, &context, RenderOpts { n_coarse: 8, n_fine: 8 });
    let det = diversity_score(&r, &targets, 10, 0).unwrap();
    let mvcn_zero = det.observed_var == 0.0 && det.unobserved_var == 0.0;
    outcome(
        unobs > DIVERSITY_RATIO * obs && mvcn_zero,
        format!(
            "laser-nv unobserved {unobs:.2e} vs observed {obs:.2e} (ratio {:.2}, {n_unobs}/{n_obs} px); mvcn {:.1e}/{:.1e}",
            unobs / obs.max(f64::MIN_POSITIVE),
            det.observed_var,
            det.unobserved_var
        ),
    )
}

fn determinism(tier: &Tier) -> Outcome {
    let data = tiny_data(800, 4, 4);
    let ckpt = || {
        let mut cfg = smoke_config(Variant::LaserNv);
        cfg.train.steps = 100;
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&data, |_, _| Ok(())).unwrap();
        Checkpoint::from_trainer(&t).to_bytes()
    };
    let (a, b) = (ckpt(), ckpt());
    let dataset_bytes = |name: &str| {
        let dir = tier.dir.join(name);
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&dir, &generate_dataset(801, 3, 4, ViewSpec::square(16)).unwrap()).unwrap();
        let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
        let mut stack = vec![dir.clone()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((p.strip_prefix(&dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let (da, db) = (dataset_bytes("c8-data-a"), dataset_bytes("c8-data-b"));
    outcome(
        a == b && da == db && !da.is_empty(),
        format!("checkpoint after 100 steps {} bytes, identical: {}; dataset {} files, identical: {}", a.len(), a == b, da.len(), da == db),
    )
}

fn ablations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let (mvcn, mvcn_params) = Model::build(&smoke_config(Variant::Mvcn).model, 1).unwrap();
    let mvcn_flow = mvcn_params.numel_under("prior") + mvcn_params.numel_under("posterior");
    let mvcn_ok = mvcn_flow == 0 && matches!(mvcn.prior, lasernv::model::LatentDist::None);

    // laser-no-geom: replace the local feature maps with noise; nothing moves.
    let mut cfg = smoke_config(Variant::LaserNoGeom).model;
    cfg.background = BackgroundKind::Latent;
    let (nogeom, mut params) = Model::build(&cfg, 2).unwrap();
    jitter(&mut params, 0.3, &mut rng);
    let params: ParamTree<f64> = params.cast();
    let data = generate_dataset(902, 1, 2, ViewSpec::square(8)).unwrap();
    let cams: Vec<_> = data.scenes[0].views.iter().map(|v| v.camera.clone()).collect();
    let z = gaussian(&[cfg.latent_k, cfg.latent_dim], &mut rng);
    let x: Vec<[f64; 3]> = (0..64).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(0.0..3.0)]).collect();
    let d: Vec<[f64; 3]> = (0..64).map(|i| if i % 2 == 0 { [1.0, 0.0, 0.0] } else { [0.0, 0.6, -0.8] }).collect();
    let query = |maps: Tensor<f64>| {
        let tape = Tape::inference(&params);
        let cond = SceneCond {
            latents: Latents::Set(tape.constant(z.clone())),
            views: Some(ViewMaps { cameras: cams.clone(), maps: tape.constant(maps) }),
            tokens: None,
        };
        let rad = nogeom.query_points(&cond, &x, &d).unwrap();
        let mut v = rad.sigma.value().to_f64_vec();
        v.extend(rad.rgb.value().to_f64_vec());
        v
    };
    let a = query(gaussian(&[2, 4, 4, cfg.local_hidden], &mut rng));
    let b = query(gaussian(&[2, 4, 4, cfg.local_hidden], &mut rng));
    let nogeom_ok = a == b && nogeom.scene.local.is_none() && params.numel_under("scene/local") == 0;

    // nerf-vae: the prior is N(0, I) whatever the context.
    let (vae, _) = Model::build(&smoke_config(Variant::NerfVae).model, 3).unwrap();
    let tape = Tape::<f64>::new();
    let mut prior_err: f64 = 0.0;
    for _ in 0..20 {
        let z = gaussian(&[1, cfg.latent_dim], &mut rng);
        let expect = -0.5 * z.data().iter().map(|v| v * v).sum::<f64>() - 0.5 * cfg.latent_dim as f64 * (2.0 * std::f64::consts::PI).ln();
        let tokens = tape.constant(gaussian(&[5, cfg.encoder.token_dim()], &mut rng));
        let got = vae.prior.logprob(tape.constant(z), tokens).unwrap().item();
        prior_err = prior_err.max((got - expect).abs());
    }
    let vae_ok = prior_err < 1e-12 && matches!(vae.prior, lasernv::model::LatentDist::StandardNormal { .. });
    outcome(
        mvcn_ok && nogeom_ok && vae_ok,
        format!(
            "mvcn latent-distribution params {mvcn_flow}; laser-no-geom unchanged under new feature maps: {nogeom_ok}; nerf-vae prior vs N(0,I) {prior_err:.1e}"
        ),
    )
}

fn main() {
    let tier = Tier::from_env();
    println!("acceptance tier: {}", if tier.full { "full" } else { "quick (reduced training budgets)" });
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "flow correctness", flow_suite());
    report(2, "renderer oracles", renderer_suite());
    report(3, "full-model symmetry", symmetry());
    report(4, "ELBO gradient check", elbo_gradient());
    let (o5, trained) = training_smoke(&tier);
    report(5, "training smoke", o5);
    report(6, "capacity scaling", capacity(&tier));
    report(7, "diversity", diversity(&tier, &trained));
    report(8, "determinism", determinism(&tier));
    report(9, "ablation wiring", ablations());
    println!("acceptance: {failed} of 9 criteria failed");
    if failed > 0 && std::env::var("LASERNV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
