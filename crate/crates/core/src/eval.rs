//! Image metrics, full-image rendering and evaluation of trained models.

use std::time::Instant;

use lasernv_tensor::{ParamTree, Tape, Tensor};
use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, SceneDataset, SceneRecord, View};
use crate::geometry::{Camera, Projection, Ray};
use crate::model::{Depths, Model, RenderOpts, Variant};
use crate::training::color_loglik;
use crate::{Error, Result};

/// PSNR in dB of two images with values in `[0, 1]`; infinite when they are equal.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr of differently sized images");
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two row-major RGB images over channels and every position
/// where the Gaussian window fits.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height * 3 || b.len() != a.len() {
        return Err(Error::domain("ssim: images must both be width x height x 3"));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::domain(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {width}x{height}")));
    }
    let g = gaussian_window();
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let at = |img: &[f32], x: usize, y: usize| img[(y * width + x) * 3 + c] as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let w = gy * gx;
                        let (va, vb) = (at(a, ox + dx, oy + dy), at(b, ox + dx, oy + dy));
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

/// Which distribution scene latents are drawn from when rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource<'a> {
    /// The conditional prior given the context views. The unconditional
    /// variant has no useful prior and uses its posterior given the context.
    Prior,
    /// The posterior given the context plus these extra views of the scene.
    Posterior(&'a [usize]),
}

/// Renders whole images of one scene under a fixed latent draw.
///
/// Rays are processed in chunks, each on its own tape; the context is
/// re-encoded per chunk and the latents re-drawn from the same seed, so every
/// chunk sees the identical latent sample.
pub struct SceneRenderer<'a> {
    pub model: &'a Model,
    pub params: &'a ParamTree<f32>,
    pub scene: &'a SceneRecord,
    pub context: &'a [usize],
    pub opts: RenderOpts,
    pub chunk: usize,
}

/// A rendered view: row-major RGB in `[0, 1]` and expected depth along each ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
}

impl<'a> SceneRenderer<'a> {
    pub fn new(model: &'a Model, params: &'a ParamTree<f32>, scene: &'a SceneRecord, context: &'a [usize], opts: RenderOpts) -> Self {
        Self { model, params, scene, context, opts, chunk: 256 }
    }

    fn views(&self, extra: &[usize]) -> (Vec<Vec<f32>>, Vec<Camera>) {
        let ids = self.context.iter().chain(extra);
        ids.map(|&v| (self.scene.views[v].image_f32(), self.scene.views[v].camera.clone())).unzip()
    }

    /// Runs `f` on the scene conditioning of a fresh tape, with latents drawn
    /// from `source` using `seed`. `f` also receives `log p(Z|V) - log q(Z)`
    /// when latents come from the posterior.
    fn with_cond<R>(
        &self,
        source: LatentSource<'_>,
        seed: u64,
        f: impl for<'t> FnOnce(&'t Tape<'t, f32>, &crate::scenefn::SceneCond<'t, f32>, Option<f64>) -> Result<R>,
    ) -> Result<R> {
        let m = self.model;
        let extra = match source {
            LatentSource::Posterior(extra) => extra,
            LatentSource::Prior => &[],
        };
        let use_posterior = matches!(source, LatentSource::Posterior(_)) || m.cfg.variant == Variant::NerfVae;
        let (images, cams) = self.views(extra);
        let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
        let tape = Tape::inference(self.params);
        let pyramid = m.encode(&tape, &refs, &cams)?;
        let context = pyramid.first_views(self.context.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (draw, weight) = if use_posterior {
            let draw = m.sample_latents(&m.posterior, &pyramid, &mut rng)?;
            let weight = match &draw {
                Some(d) => Some((m.prior.logprob(d.z, context.context_tokens())?.item() - d.logprob.item()) as f64),
                None => None,
            };
            (draw, weight)
        } else {
            (m.sample_latents(&m.prior, &context, &mut rng)?, None)
        };
        let cond = m.condition(&context, &cams[..self.context.len()], m.latents(draw.as_ref()));
        f(&tape, &cond, weight)
    }

    /// Renders `camera` with latents drawn from `source` using `latent_seed`;
    /// `ray_seed` drives the sample depths along the rays.
    pub fn render(&self, camera: &Camera, source: LatentSource<'_>, latent_seed: u64, ray_seed: u64) -> Result<Image> {
        let rays = pixel_rays(camera);
        let mut rgb = Vec::with_capacity(rays.len() * 3);
        let mut depth = Vec::with_capacity(rays.len());
        for (i, chunk) in rays.chunks(self.chunk).enumerate() {
            self.with_cond(source, latent_seed, |_, cond, _| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ray_seed, i));
                let out = self.model.render_rays(cond, chunk, self.opts, Depths::Draw(&mut rng))?;
                let o = out.output();
                rgb.extend_from_slice(o.color.value().data());
                depth.extend_from_slice(o.depth.value().data());
                Ok(())
            })?;
        }
        Ok(Image { width: camera.width, height: camera.height, rgb, depth })
    }

    /// Colour log-likelihood of the stored images of `targets` under one
    /// posterior sample, plus the importance weight `log p(Z|V) - log q(Z)`.
    fn posterior_loglik(&self, targets: &[usize], seed: u64, std: f64) -> Result<(f64, f64)> {
        let mut ll = 0.0;
        let mut weight = 0.0;
        for (ti, &t) in targets.iter().enumerate() {
            let view = &self.scene.views[t];
            let rays = pixel_rays(&view.camera);
            let target = view.image_f32();
            for (i, chunk) in rays.chunks(self.chunk).enumerate() {
                let start = i * self.chunk;
                self.with_cond(LatentSource::Posterior(targets), seed, |tape, cond, w| {
                    weight = w.ok_or_else(|| Error::Unsupported("importance weights need a latent posterior".into()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ti * 1_000_003 + i));
                    let out = self.model.render_rays(cond, chunk, self.opts, Depths::Draw(&mut rng))?;
                    let tgt = Tensor::new(vec![chunk.len(), 3], target[3 * start..3 * (start + chunk.len())].to_vec());
                    ll += color_loglik(out.output().color, tape.constant(tgt), std).sum().item() as f64;
                    Ok(())
                })?;
            }
        }
        Ok((ll, weight))
    }
}

/// Rays through every pixel centre, row by row.
pub fn pixel_rays(camera: &Camera) -> Vec<Ray> {
    (0..camera.height).flat_map(|r| (0..camera.width).map(move |c| camera.pixel_center_ray(c, r))).collect()
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Importance-sampled colour log-likelihood of the `targets` images given the
/// context, per pixel and channel, with `n_samples` posterior proposals.
pub fn iw_loglik(r: &SceneRenderer<'_>, targets: &[usize], n_samples: usize, std: f64, seed: u64) -> Result<f64> {
    if !r.model.cfg.variant.is_generative() {
        return Err(Error::Unsupported(format!("{} is deterministic and has no likelihood over scenes", r.model.cfg.variant.name())));
    }
    if n_samples == 0 || targets.is_empty() {
        return Err(Error::domain("iw_loglik needs at least one sample and one target view"));
    }
    let terms = (0..n_samples)
        .map(|s| r.posterior_loglik(targets, mix_seed(seed, s), std).map(|(ll, w)| ll + w))
        .collect::<Result<Vec<_>>>()?;
    let values: usize = targets.iter().map(|&t| r.scene.views[t].image.len()).sum();
    Ok(log_mean_exp(&terms) / values as f64)
}

/// Whether the surface seen by pixel `(col, row)` of `view` is also seen by
/// one of `context`, judged from the stored depth maps. Sky pixels are `None`.
pub fn observed(view: &View, col: usize, row: usize, context: &[&View]) -> Option<bool> {
    let cam = &view.camera;
    let d = view.depth[row * cam.width + col] as f64;
    if d >= cam.t_far {
        return None;
    }
    let x: Point3<f64> = cam.pixel_center_ray(col, row).at(d);
    Some(context.iter().any(|c| {
        let cc = &c.camera;
        if !cc.is_visible(&x) {
            return false;
        }
        let Projection::InFront { uv, .. } = cc.project_point(&x) else { return false };
        let (u, v) = (uv.x.floor() as usize, uv.y.floor() as usize);
        let seen = c.depth[v * cc.width + u] as f64;
        let dist = (x - cc.center()).norm();
        // Slack for the pixel footprint at grazing angles.
        (seen - dist).abs() < 0.05 + 0.03 * dist
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Mean per-pixel variance over pixels whose surface some context view sees.
    pub observed_var: f64,
    /// Mean per-pixel variance over pixels no context view sees.
    pub unobserved_var: f64,
    pub observed_px: usize,
    pub unobserved_px: usize,
}

/// Per-pixel colour variance across `n_samples` prior samples on the
/// `targets` views, split by whether the context observes the pixel.
/// Sample depths along the rays are the same for every sample, so only the
/// latents vary.
pub fn diversity_score(r: &SceneRenderer<'_>, targets: &[usize], n_samples: usize, seed: u64) -> Result<Diversity> {
    if n_samples == 0 {
        return Err(Error::domain("diversity needs at least one sample"));
    }
    let ctx: Vec<&View> = r.context.iter().map(|&v| &r.scene.views[v]).collect();
    let (mut obs, mut unobs) = ((0.0, 0usize), (0.0, 0usize));
    for (ti, &t) in targets.iter().enumerate() {
        let view = &r.scene.views[t];
        let samples = (0..n_samples)
            .map(|s| r.render(&view.camera, LatentSource::Prior, mix_seed(seed, ti * 7919 + s), mix_seed(seed, usize::MAX - ti)))
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = (view.camera.width, view.camera.height);
        for row in 0..h {
            for col in 0..w {
                let Some(seen) = observed(view, col, row, &ctx) else { continue };
                let p = row * w + col;
                let mut var = 0.0;
                for c in 0..3 {
                    let vals = samples.iter().map(|img| img.rgb[3 * p + c] as f64);
                    let mean = vals.clone().sum::<f64>() / n_samples as f64;
                    var += vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n_samples as f64;
                }
                let bucket = if seen { &mut obs } else { &mut unobs };
                bucket.0 += var / 3.0;
                bucket.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(Diversity { observed_var: mean(obs), unobserved_var: mean(unobs), observed_px: obs.1, unobserved_px: unobs.1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: f64,
    /// Absent for images smaller than the SSIM window.
    pub ssim: Option<f64>,
}

fn score(r: &SceneRenderer<'_>, views: &[usize], seed: u64) -> Result<ImageScores> {
    let (mut psnr_sum, mut ssim_sum) = (0.0, Some(0.0));
    for (i, &v) in views.iter().enumerate() {
        let view = &r.scene.views[v];
        let img = r.render(&view.camera, LatentSource::Prior, mix_seed(seed, i), mix_seed(seed, usize::MAX - i))?;
        let gt = view.image_f32();
        psnr_sum += psnr(&img.rgb, &gt).min(PSNR_CAP);
        ssim_sum = match (ssim_sum, ssim(&img.rgb, &gt, img.width, img.height)) {
            (Some(acc), Ok(s)) => Some(acc + s),
            _ => None,
        };
    }
    let n = views.len() as f64;
    Ok(ImageScores { psnr: psnr_sum / n, ssim: ssim_sum.map(|s| s / n) })
}

/// Per-image PSNR is capped here before averaging, so one exact image does
/// not make the mean infinite.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    /// Reconstruction of the context views themselves.
    pub context: ImageScores,
    /// Novel target views.
    pub target: ImageScores,
    pub iw_loglik: Option<f64>,
    pub diversity: Diversity,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub context_psnr: f64,
    pub context_ssim: Option<f64>,
    pub target_psnr: f64,
    pub target_ssim: Option<f64>,
    pub iw_loglik: Option<f64>,
    pub observed_var: f64,
    pub unobserved_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub scenes: Vec<SceneReport>,
    pub aggregate: Aggregate,
    pub n_scenes: usize,
    pub n_context: usize,
    pub n_target: usize,
    pub n_samples: usize,
    pub seconds: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let all: Option<Vec<f64>> = v.collect();
    all.map(|a| mean(a.into_iter()))
}

impl Aggregate {
    /// Means of the per-scene entries.
    pub fn of(scenes: &[SceneReport]) -> Self {
        Self {
            context_psnr: mean(scenes.iter().map(|s| s.context.psnr)),
            context_ssim: mean_opt(scenes.iter().map(|s| s.context.ssim)),
            target_psnr: mean(scenes.iter().map(|s| s.target.psnr)),
            target_ssim: mean_opt(scenes.iter().map(|s| s.target.ssim)),
            iw_loglik: mean_opt(scenes.iter().map(|s| s.iw_loglik)),
            observed_var: mean(scenes.iter().map(|s| s.diversity.observed_var)),
            unobserved_var: mean(scenes.iter().map(|s| s.diversity.unobserved_var)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_context: usize,
    pub n_target: usize,
    /// Samples for the importance-weighted likelihood and the diversity score.
    pub n_samples: usize,
    pub render: RenderOpts,
    pub likelihood_std: f64,
    pub seed: u64,
}

/// Evaluates every scene: the first `n_context` views are the context, the
/// next `n_target` the novel views.
pub fn evaluate(model: &Model, params: &ParamTree<f32>, data: &SceneDataset, o: &EvalOptions) -> Result<EvalReport> {
    let start = Instant::now();
    let context: Vec<usize> = (0..o.n_context).collect();
    let targets: Vec<usize> = (o.n_context..o.n_context + o.n_target).collect();
    let mut scenes = Vec::with_capacity(data.scenes.len());
    for (i, scene) in data.scenes.iter().enumerate() {
        if scene.views.len() < o.n_context + o.n_target {
            return Err(Error::config(format!("scene {} has {} views, evaluation needs {}", scene.id, scene.views.len(), o.n_context + o.n_target)));
        }
        let t0 = Instant::now();
        let r = SceneRenderer::new(model, params, scene, &context, o.render);
        let seed = mix_seed(o.seed, i);
        let iw = match iw_loglik(&r, &targets, o.n_samples, o.likelihood_std, mix_seed(seed, 2)) {
            Ok(v) => Some(v),
            Err(Error::Unsupported(_)) => None,
            Err(e) => return Err(e),
        };
        scenes.push(SceneReport {
            scene: scene.id.clone(),
            context: score(&r, &context, mix_seed(seed, 0))?,
            target: score(&r, &targets, mix_seed(seed, 1))?,
            iw_loglik: iw,
            diversity: diversity_score(&r, &targets, o.n_samples, mix_seed(seed, 3))?,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(EvalReport {
        variant: model.cfg.variant.name().to_string(),
        aggregate: Aggregate::of(&scenes),
        n_scenes: scenes.len(),
        scenes,
        n_context: o.n_context,
        n_target: o.n_target,
        n_samples: o.n_samples,
        seconds: start.elapsed().as_secs_f64(),
    })
}
