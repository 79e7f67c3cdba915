//! The per-pixel ELBO objective and the optimization loop.
//!
//! Every quantity is normalized per target pixel: the reconstruction term is
//! a mean over sampled rays and the KL is divided by the number of target
//! pixels. This rescales the bound by a constant, so its optimum is unchanged.

use std::f64::consts::LN_10;

use lasernv_tensor::{ParamTree, Real, Tape, Tensor, Var};
use nalgebra::Point3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainConfig};
use crate::data::{mix_seed, SceneDataset};
use crate::geometry::{Camera, Ray};
use crate::model::{DepthPlan, Depths, Model, RenderOpts};
use crate::{Error, Result};

/// Weight of each of the two likelihoods when the depth term is on.
pub const LIKELIHOOD_MIX: f64 = 0.5;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

/// One scene of a training batch: which views play which role and which
/// target pixels are supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneItem {
    pub scene: usize,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    /// `(target index, col, row)` for the colour likelihood.
    pub image_px: Vec<(usize, usize, usize)>,
    /// `(target index, col, row)` of pixels with a surface in range.
    pub depth_px: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<SceneItem>,
}

pub fn sample_batch(data: &SceneDataset, tc: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let n = data.scenes.len();
    if n == 0 {
        return Err(Error::config("dataset has no scenes"));
    }
    let scenes: Vec<usize> = if tc.batch_scenes <= n {
        sample(rng, n, tc.batch_scenes).into_vec()
    } else {
        (0..tc.batch_scenes).map(|_| rng.random_range(0..n)).collect()
    };
    let (w, h) = (data.spec.width, data.spec.height);
    let items = scenes
        .into_iter()
        .map(|s| {
            let views = &data.scenes[s].views;
            let need = tc.n_context + tc.n_target;
            if views.len() < need {
                return Err(Error::config(format!(
                    "scene {} has {} views but training needs {need}",
                    data.scenes[s].id,
                    views.len()
                )));
            }
            let order = sample(rng, views.len(), need).into_vec();
            let (context, targets) = (order[..tc.n_context].to_vec(), order[tc.n_context..].to_vec());
            let total = tc.n_target * w * h;
            let image_px = sample(rng, total, tc.image_rays.min(total))
                .into_iter()
                .map(|i| (i / (w * h), i % w, (i % (w * h)) / w))
                .collect();
            let mut depth_px = Vec::new();
            if tc.depth_loss && tc.depth_rays > 0 {
                let mut candidates = Vec::new();
                for (ti, &v) in targets.iter().enumerate() {
                    let view = &views[v];
                    if view.depth.len() != w * h {
                        return Err(Error::config(format!("scene {} lacks depth maps needed by the depth loss", data.scenes[s].id)));
                    }
                    let cam = &view.camera;
                    for (p, &d) in view.depth.iter().enumerate() {
                        let d = d as f64;
                        if d > cam.t_near && d < cam.t_far {
                            candidates.push((ti, p % w, p / w));
                        }
                    }
                }
                depth_px = sample(rng, candidates.len(), tc.depth_rays.min(candidates.len()))
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect();
            }
            Ok(SceneItem { scene: s, context, targets, image_px, depth_px })
        })
        .collect::<Result<_>>()?;
    Ok(Batch { items })
}

/// Summary numbers of one loss evaluation, all per target pixel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    /// Reconstruction term minus the full KL.
    pub elbo: f64,
    pub recon_ll: f64,
    pub image_ll: Option<f64>,
    pub coarse_ll: Option<f64>,
    pub depth_ll: Option<f64>,
    pub kl: f64,
    pub beta: f64,
    pub density_l1: f64,
}

pub struct Loss<'t, T: Real> {
    /// Minimized objective.
    pub total: Var<'t, T>,
    pub stats: LossStats,
    /// Sample depths used for each scene's colour rays.
    pub plans: Vec<DepthPlan>,
}

/// Gaussian log density of `target` under mean `mean`, summed over the last axis.
pub fn color_loglik<'t, T: Real>(mean: Var<'t, T>, target: Var<'t, T>, std: f64) -> Var<'t, T> {
    let c = mean.dim(mean.shape().len() - 1) as f64;
    let z = mean.sub(target).scale(1.0 / std);
    z.square().sum_axis(mean.shape().len() - 1, false).scale(-0.5).add_scalar(-c * (std.ln() + HALF_LN_TAU))
}

/// Depth-guided log-likelihood of rays with known surface distance, from two
/// scene evaluations per ray: at the surface, and at a uniform point in front of it.
///
/// `sigma_logit_gt`: density pre-activation at the surface; `sigma_free`:
/// density at the free-space sample; `rgb_gt`: colour at the surface.
pub fn depth_loglik<'t, T: Real>(
    sigma_logit_gt: Var<'t, T>,
    sigma_free: Var<'t, T>,
    rgb_gt: Var<'t, T>,
    target: Var<'t, T>,
    free_len: &[f64],
    std: f64,
) -> Var<'t, T> {
    let tape = sigma_free.tape();
    let log_sigma = sigma_logit_gt.log_sigmoid().add_scalar(LN_10);
    let free = sigma_free.mul(tape.constant(Tensor::from_f64(vec![free_len.len()], free_len)));
    log_sigma.sub(free).add(color_loglik(rgb_gt, target, std))
}

/// `weight * mean(sigma)` over every evaluated sample; exactly zero when disabled.
pub fn density_penalty<'t, T: Real>(tape: &'t Tape<'t, T>, sigmas: &[Var<'t, T>], weight: f64) -> Var<'t, T> {
    match mean_of(tape, sigmas) {
        Some(m) if weight > 0.0 => m.scale(weight),
        _ => tape.scalar(0.0),
    }
}

fn mean_of<'t, T: Real>(tape: &'t Tape<'t, T>, parts: &[Var<'t, T>]) -> Option<Var<'t, T>> {
    (!parts.is_empty()).then(|| tape.concat(parts, 0).mean())
}

/// `-ELBO` per target pixel for a batch, plus the auxiliary coarse-pass
/// colour likelihood and the density penalty.
///
/// All randomness (latent noise, sample depths, free-space points) derives
/// from `seed`. With `replay`, the sample depths of an earlier call are
/// reused, which makes the loss a smooth function of the parameters.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<'t, T: Real>(
    model: &Model,
    tape: &'t Tape<'t, T>,
    data: &SceneDataset,
    batch: &Batch,
    tc: &TrainConfig,
    beta: f64,
    seed: u64,
    replay: Option<&[DepthPlan]>,
) -> Result<Loss<'t, T>> {
    let (w, h) = (data.spec.width, data.spec.height);
    let opts = RenderOpts { n_coarse: tc.n_coarse, n_fine: tc.n_fine };
    let std = tc.likelihood_std;
    let (mut image_ll, mut coarse_ll, mut depth_ll, mut sigmas) = (vec![], vec![], vec![], vec![]);
    let mut kl_sum = tape.scalar(0.0);
    let mut plans = Vec::with_capacity(batch.items.len());
    for (i, item) in batch.items.iter().enumerate() {
        let scene = &data.scenes[item.scene];
        let mut latent_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3 * i));
        let mut depth_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3 * i + 1));
        let mut free_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3 * i + 2));

        let n_post = if model.cfg.variant.is_generative() { tc.n_posterior } else { tc.n_context };
        let post_views: Vec<usize> = item.context.iter().chain(&item.targets).take(n_post).copied().collect();
        let images: Vec<Vec<f32>> = post_views.iter().map(|&v| scene.views[v].image_f32()).collect();
        let image_refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
        let cams: Vec<Camera> = post_views.iter().map(|&v| scene.views[v].camera.clone()).collect();
        let pyramid = model.encode(tape, &image_refs, &cams)?;
        let context = pyramid.first_views(tc.n_context);

        let draw = model.sample_latents(&model.posterior, &pyramid, &mut latent_rng)?;
        if let Some(d) = &draw {
            let logp = model.prior.logprob(d.z, context.context_tokens())?;
            kl_sum = kl_sum.add(d.logprob.sub(logp));
        }
        let cond = model.condition(&context, &cams[..tc.n_context], model.latents(draw.as_ref()));

        if !item.image_px.is_empty() {
            let rays: Vec<Ray> = item
                .image_px
                .iter()
                .map(|&(t, c, r)| scene.views[item.targets[t]].camera.pixel_center_ray(c, r))
                .collect();
            let target: Vec<f64> = item
                .image_px
                .iter()
                .flat_map(|&(t, c, r)| scene.views[item.targets[t]].pixel(c, r).map(f64::from))
                .collect();
            let target = tape.constant(Tensor::from_f64(vec![rays.len(), 3], &target));
            let depths = match replay {
                Some(p) => Depths::Fixed(&p[i]),
                None => Depths::Draw(&mut depth_rng),
            };
            let rendered = model.render_rays(&cond, &rays, opts, depths)?;
            image_ll.push(color_loglik(rendered.output().color, target, std));
            if rendered.fine.is_some() {
                coarse_ll.push(color_loglik(rendered.coarse.color, target, std));
            }
            sigmas.extend(rendered.sigmas);
            plans.push(rendered.plan);
        } else {
            plans.push(DepthPlan { coarse: vec![], fine: None });
        }

        if tc.depth_loss && !item.depth_px.is_empty() {
            let n = item.depth_px.len();
            let mut x = Vec::with_capacity(2 * n);
            let mut d = Vec::with_capacity(2 * n);
            let mut free_len = Vec::with_capacity(n);
            let mut target = Vec::with_capacity(3 * n);
            let mut free_pts = Vec::with_capacity(n);
            for &(t, c, r) in &item.depth_px {
                let view = &scene.views[item.targets[t]];
                let ray = view.camera.pixel_center_ray(c, r);
                let t_gt = view.depth[r * w + c] as f64;
                let u = free_rng.random_range(ray.t_near..t_gt);
                let dir = [ray.direction.x, ray.direction.y, ray.direction.z];
                x.push(point(ray.at(t_gt)));
                d.push(dir);
                free_pts.push(point(ray.at(u)));
                free_len.push(t_gt - ray.t_near);
                target.extend(view.pixel(c, r).map(f64::from));
            }
            x.extend(free_pts);
            d.extend_from_within(..);
            let rad = model.query_points(&cond, &x, &d)?;
            let target = tape.constant(Tensor::from_f64(vec![n, 3], &target));
            depth_ll.push(depth_loglik(
                rad.sigma_logit.narrow(0, 0, n),
                rad.sigma.narrow(0, n, n),
                rad.rgb.narrow(0, 0, n),
                target,
                &free_len,
                std,
            ));
            sigmas.push(rad.sigma);
        }
    }

    let image = mean_of(tape, &image_ll);
    let coarse = mean_of(tape, &coarse_ll);
    let depth = mean_of(tape, &depth_ll);
    let recon = match (image, depth) {
        (Some(i), Some(d)) => i.add(d).scale(LIKELIHOOD_MIX),
        (Some(i), None) => i,
        (None, Some(d)) => d,
        (None, None) => return Err(Error::config("batch supervises no rays")),
    };
    let pixels = (tc.n_target * w * h * batch.items.len()) as f64;
    let kl = kl_sum.scale(1.0 / pixels);
    let mut total = recon.sub(kl.scale(beta)).neg();
    if let Some(c) = coarse {
        let weight = if depth.is_some() { LIKELIHOOD_MIX } else { 1.0 };
        total = total.sub(c.scale(weight));
    }
    let l1 = density_penalty(tape, &sigmas, tc.density_l1);
    if tc.density_l1 > 0.0 {
        total = total.add(l1);
    }
    let val = |v: Option<Var<'t, T>>| v.map(|v| v.item().as_f64());
    let stats = LossStats {
        elbo: recon.item().as_f64() - kl.item().as_f64(),
        recon_ll: recon.item().as_f64(),
        image_ll: val(image),
        coarse_ll: val(coarse),
        depth_ll: val(depth),
        kl: kl.item().as_f64(),
        beta,
        density_l1: l1.item().as_f64(),
    };
    Ok(Loss { total, stats, plans })
}

fn point(p: Point3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamTree<f32>, lr: f64) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamTree<f32>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = params.grad(id).clone();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let p = params.value_mut(id).data_mut();
            for ((pi, &mi), &vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= step * mi / (vi.sqrt() / c2s + eps);
            }
        }
    }
}

/// Rescales the gradients in `params` so their global norm is at most `cap`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamTree<f32>, cap: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > cap {
        let s = (cap / norm) as f32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            params.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub elbo: f64,
    pub recon_ll: f64,
    pub kl: f64,
    pub beta: f64,
    pub image_ll: Option<f64>,
    pub depth_ll: Option<f64>,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Model, parameters and optimizer state of a run.
pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub params: ParamTree<f32>,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Model::build(&cfg.model, mix_seed(cfg.train.seed, usize::MAX))?;
        let adam = Adam::new(&params, cfg.train.lr);
        Ok(Self { cfg, model, params, adam, step: 0 })
    }

    /// One optimization step. On a non-finite loss or gradient the
    /// parameters are left untouched and a numeric error is returned.
    pub fn train_step(&mut self, data: &SceneDataset) -> Result<StepRecord> {
        let start = std::time::Instant::now();
        let tc = &self.cfg.train;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, self.step as usize));
        let batch = sample_batch(data, tc, &mut rng)?;
        let beta = tc.beta(self.step);
        let seed: u64 = rng.random();
        let (loss, stats, grads) = {
            let tape = Tape::with_params(&self.params);
            let loss = elbo_loss(&self.model, &tape, data, &batch, tc, beta, seed, None)?;
            let value = loss.total.item() as f64;
            if !value.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at step {}: {:?}", self.step, loss.stats)));
            }
            let grads = loss.total.backward();
            let grads: Vec<_> = grads.params().map(|(id, g)| (id, g.clone())).collect();
            (value, loss.stats, grads)
        };
        self.params.zero_grads();
        for (id, g) in grads {
            *self.params.grad_mut(id) = g;
        }
        let norm = self.params.grad_norm();
        if !norm.is_finite() {
            let bad: Vec<_> = self
                .params
                .ids()
                .filter(|&id| !self.params.grad(id).all_finite())
                .map(|id| self.params.name(id).to_string())
                .take(5)
                .collect();
            return Err(Error::numeric(format!("non-finite gradient at step {} in {bad:?}", self.step)));
        }
        clip_grad_norm(&mut self.params, tc.grad_clip);
        self.adam.update(&mut self.params);
        let record = StepRecord {
            step: self.step,
            loss,
            elbo: stats.elbo,
            recon_ll: stats.recon_ll,
            kl: stats.kl,
            beta,
            image_ll: stats.image_ll,
            depth_ll: stats.depth_ll,
            grad_norm: norm,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(record)
    }

    /// Steps until `cfg.train.steps`, reporting each record.
    pub fn run(&mut self, data: &SceneDataset, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.train.steps {
            let rec = self.train_step(data)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}
