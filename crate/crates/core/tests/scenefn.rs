use lasernv::config::Config;
use lasernv::data::{generate_scene, sample_views, ViewSpec};
use lasernv::geometry::Camera;
use lasernv::model::{Model, Variant};
use lasernv::nn::jitter;
use lasernv::scenefn::{bilinear_gather, bilinear_sample, BackgroundKind, Latents, Pass, Points, SceneCond, ViewMaps, SIGMA_MAX};
use lasernv_tensor::gradcheck::{directional_fd, rel_err};
use lasernv_tensor::{ParamTree, Tape, Tensor};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Fixture {
    model: Model,
    params: ParamTree<f64>,
    cameras: Vec<Camera>,
    latents: Tensor<f64>,
    maps: Tensor<f64>,
    tokens: Tensor<f64>,
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn fixture(variant: Variant, background: BackgroundKind, views: usize, seed: u64) -> Fixture {
    let mut cfg = Config::preset("smoke").unwrap().model;
    cfg.variant = variant;
    cfg.background = background;
    let (model, mut params) = Model::build(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter(&mut params, 0.3, &mut rng);
    let cameras = sample_views(&generate_scene(seed), seed, views, &ViewSpec::square(8)).unwrap();
    let dim = if variant == Variant::CondNerfVae || variant == Variant::NerfVae { 1 } else { cfg.latent_k };
    Fixture {
        model,
        params: params.cast(),
        cameras,
        latents: gaussian(&[dim, cfg.latent_dim], &mut rng),
        maps: gaussian(&[views, 4, 4, cfg.local_hidden], &mut rng),
        tokens: gaussian(&[views, cfg.encoder.token_dim()], &mut rng),
    }
}

/// Points around the scene center, including some behind or beside every camera.
fn points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let x = (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)]).collect();
    let d = (0..n)
        .map(|_| {
            let v = [rng.random_range(-1.0..1.0f64), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
            v.map(|c| c / norm)
        })
        .collect();
    (x, d)
}

fn flat(v: &[[f64; 3]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// `(sigma, rgb)` of the fine head with the given conditioning tensors.
fn evaluate(f: &Fixture, latents: &Tensor<f64>, maps: &Tensor<f64>, cameras: &[Camera], x: &[[f64; 3]], d: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::inference(&f.params);
    let z = tape.constant(latents.clone());
    let latents = match f.model.cfg.variant {
        Variant::Mvcn => Latents::None,
        Variant::CondNerfVae | Variant::NerfVae => Latents::Vector(z),
        _ => Latents::Set(z),
    };
    let cond = SceneCond {
        latents,
        views: f.model.scene.local.is_some().then(|| ViewMaps { cameras: cameras.to_vec(), maps: tape.constant(maps.clone()) }),
        tokens: Some(tape.constant(f.tokens.clone())),
    };
    let rad = f.model.query_points(&cond, x, d).unwrap();
    (rad.sigma.value().to_f64_vec(), rad.rgb.value().to_f64_vec())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn density_and_colour_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in [Variant::LaserNv, Variant::LaserNoGeom, Variant::Mvcn, Variant::CondNerfVae] {
        let bg = if matches!(variant, Variant::CondNerfVae) { BackgroundKind::Mlp } else { BackgroundKind::Context };
        let f = fixture(variant, bg, 2, 1);
        let (x, d) = points(200, &mut rng);
        let (sigma, rgb) = evaluate(&f, &f.latents, &f.maps, &f.cameras, &x, &d);
        assert!(sigma.iter().all(|&s| (0.0..=SIGMA_MAX).contains(&s)), "{variant:?}");
        assert!(rgb.iter().all(|&c| (0.0..=1.0).contains(&c)), "{variant:?}");
    }
}

#[test]
fn latent_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [Variant::LaserNv, Variant::LaserNoGeom] {
        let f = fixture(variant, BackgroundKind::Context, 2, 3);
        let (x, d) = points(64, &mut rng);
        let base = evaluate(&f, &f.latents, &f.maps, &f.cameras, &x, &d);
        let k = f.latents.dim(0);
        let dim = f.latents.dim(1);
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::from_fn(vec![k, dim], |i| f.latents.data()[perm[i / dim] * dim + i % dim]);
        let other = evaluate(&f, &permuted, &f.maps, &f.cameras, &x, &d);
        assert!(max_diff(&base.0, &other.0) < 1e-12 && max_diff(&base.1, &other.1) < 1e-12);
    }
}

fn swap_views(maps: &Tensor<f64>, cameras: &[Camera]) -> (Tensor<f64>, Vec<Camera>) {
    let per = maps.numel() / maps.dim(0);
    let mut data = maps.data()[per..].to_vec();
    data.extend_from_slice(&maps.data()[..per]);
    let mut cams = cameras[1..].to_vec();
    cams.push(cameras[0].clone());
    (Tensor::new(maps.shape().to_vec(), data), cams)
}

#[test]
fn view_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in [Variant::LaserNv, Variant::Mvcn] {
        let f = fixture(variant, BackgroundKind::Context, 3, 5);
        let (x, d) = points(64, &mut rng);
        let base = evaluate(&f, &f.latents, &f.maps, &f.cameras, &x, &d);
        let (maps, cams) = swap_views(&f.maps, &f.cameras);
        let other = evaluate(&f, &f.latents, &maps, &cams, &x, &d);
        assert!(max_diff(&base.0, &other.0) < 1e-12 && max_diff(&base.1, &other.1) < 1e-12);
    }
}

#[test]
fn views_that_cannot_see_a_point_do_not_affect_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for variant in [Variant::LaserNv, Variant::Mvcn] {
        let f = fixture(variant, BackgroundKind::Context, 2, 7);
        let (x, d) = points(300, &mut rng);
        let base = evaluate(&f, &f.latents, &f.maps, &f.cameras, &x, &d);
        // Replace every feature of view 1.
        let per = f.maps.numel() / 2;
        let mut changed = f.maps.clone();
        for v in &mut changed.data_mut()[per..] {
            *v = StandardNormal.sample(&mut rng);
        }
        let other = evaluate(&f, &f.latents, &changed, &f.cameras, &x, &d);
        let (mut hidden, mut seen_changed) = (0, 0);
        for (i, p) in x.iter().enumerate() {
            let diff = (base.0[i] - other.0[i]).abs();
            if f.cameras[1].is_visible(&Point3::new(p[0], p[1], p[2])) {
                if diff > 1e-9 {
                    seen_changed += 1;
                }
            } else {
                hidden += 1;
                assert!(diff < 1e-12, "{variant:?}: point {i} invisible to view 1 changed by {diff}");
                assert!(max_diff(&base.1[i * 3..i * 3 + 3], &other.1[i * 3..i * 3 + 3]) < 1e-12);
            }
        }
        assert!(hidden > 0 && seen_changed > 0, "{variant:?}: {hidden} hidden, {seen_changed} visible points changed");
    }
}

#[test]
fn geometry_free_variant_ignores_view_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = fixture(Variant::LaserNoGeom, BackgroundKind::Constant, 2, 9);
    assert!(f.model.scene.local.is_none());
    let (x, d) = points(50, &mut rng);
    let base = evaluate(&f, &f.latents, &f.maps, &f.cameras, &x, &d);
    let other = evaluate(&f, &f.latents, &gaussian(f.maps.shape(), &mut rng), &f.cameras, &x, &d);
    assert_eq!(base, other);
}

#[test]
fn bilinear_sampling_cases() {
    // 2x3 map with one channel: value = 10 * row + col.
    let map = Tensor::<f64>::from_fn(vec![2, 3, 1], |i| (10 * (i / 3) + i % 3) as f64);
    let at = |u: f64, v: f64| bilinear_sample(&map, (u, v))[0];
    assert_eq!(at(0.5, 0.5), 0.0);
    assert_eq!(at(2.5, 1.5), 12.0);
    assert!((at(1.0, 0.5) - 0.5).abs() < 1e-12);
    assert!((at(1.5, 1.0) - 6.0).abs() < 1e-12);
    assert!((at(1.25, 0.75) - (0.75 + 2.5)).abs() < 1e-12);
    // Clamped outside the texel centers.
    assert_eq!(at(-3.0, 0.5), 0.0);
    assert_eq!(at(9.0, 9.0), 12.0);
    assert_eq!(at(0.0, 1.7), 10.0);
}

#[test]
fn bilinear_gather_gradient_in_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let maps = gaussian(&[2, 4, 5, 3], &mut rng);
    let uv: Vec<f64> = (0..12).map(|i| if i < 6 { rng.random_range(0.6..4.4) } else { rng.random_range(0.6..3.4) }).collect();
    let probe = gaussian(&[6, 3], &mut rng);
    let eval = |v: &[f64], want: bool| {
        let tape = Tape::<f64>::new();
        let m = tape.var(maps.clone());
        let us = tape.var(Tensor::new(vec![6], v[..6].to_vec()));
        let vs = tape.var(Tensor::new(vec![6], v[6..].to_vec()));
        let y = bilinear_gather(m, 1, us, vs).mul(tape.constant(probe.clone())).sum();
        let mut g = Vec::new();
        if want {
            let grads = y.backward();
            g = grads.wrt(us).unwrap().to_f64_vec();
            g.extend(grads.wrt(vs).unwrap().to_f64_vec());
        }
        (y.item(), g)
    };
    let analytic = eval(&uv, true).1;
    let numeric = lasernv_tensor::gradcheck::numerical_gradient(&mut |v| eval(v, false).0, &uv, 1e-7);
    assert!(lasernv_tensor::gradcheck::max_rel_err(&analytic, &numeric, 1e-6) < 1e-6);
}

#[test]
fn density_gradient_in_position_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = fixture(Variant::LaserNv, BackgroundKind::Context, 2, 13);
    // Points in front of both cameras, so the local-feature path is exercised.
    let mut x = Vec::new();
    while x.len() < 8 {
        let (p, _) = points(1, &mut rng);
        let q = Point3::new(p[0][0], p[0][1], p[0][2]);
        if f.cameras.iter().all(|c| c.is_visible(&q)) {
            x.push(p[0]);
        }
    }
    let (_, d) = points(8, &mut rng);
    let probe = gaussian(&[8], &mut rng);
    let eval = |xs: &[f64], want: bool| {
        let tape = Tape::with_params(&f.params);
        let xv = tape.var(Tensor::new(vec![8, 3], xs.to_vec()));
        let pts = Points::new(xv, tape.constant(Tensor::new(vec![8, 3], flat(&d))), &f.model.scene.cfg);
        let cond = SceneCond {
            latents: Latents::Set(tape.constant(f.latents.clone())),
            views: Some(ViewMaps { cameras: f.cameras.clone(), maps: tape.constant(f.maps.clone()) }),
            tokens: None,
        };
        let rad = f.model.scene.evaluate(&pts, &cond, Pass::Coarse).unwrap();
        let y = rad.sigma_logit.mul(tape.constant(probe.clone())).sum();
        let g = if want { y.backward().wrt(xv).unwrap().to_f64_vec() } else { Vec::new() };
        (y.item(), g)
    };
    let x0 = flat(&x);
    let analytic = eval(&x0, true).1;
    for s in 0..3 {
        let mut r = ChaCha8Rng::seed_from_u64(50 + s);
        let dir: Vec<f64> = (0..24).map(|_| StandardNormal.sample(&mut r)).collect();
        let projected: f64 = analytic.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let numeric = directional_fd(&mut |v| eval(v, false).0, &x0, &dir, 1e-6);
        assert!(rel_err(projected, numeric, 1e-6) < 1e-5, "{projected} vs {numeric}");
    }
}

#[test]
fn incompatible_backgrounds_are_config_errors() {
    let mut cfg = Config::preset("smoke").unwrap().model;
    cfg.variant = Variant::CondNerfVae;
    cfg.background = BackgroundKind::Context;
    assert_eq!(Model::build(&cfg, 0).err().unwrap().exit_code(), 2);
    cfg.variant = Variant::Mvcn;
    cfg.background = BackgroundKind::Latent;
    assert!(Model::build(&cfg, 0).is_err());
    cfg.variant = Variant::LaserNv;
    cfg.background = BackgroundKind::Mlp;
    assert!(Model::build(&cfg, 0).is_err());
}
