//! Model variants: encoder, latent prior and posterior, scene function, and
//! hierarchical rendering of rays with a trunk shared between passes.

use std::rc::Rc;

use lasernv_tensor::{ParamTree, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{view_input, Encoder, EncoderConfig, FeaturePyramid};
use crate::flow::{base_logprob, base_sample, Direction, FlowConfig, SetFlow, SCALE_CLAMP};
use crate::geometry::{Camera, EncodingRange, Ray};
use crate::nn::{Builder, Init, Linear};
use crate::renderer::{composite, inverse_cdf_samples, stratified_samples, Composite};
use crate::scenefn::{BackgroundKind, Latents, Pass, Points, SceneCond, SceneFnConfig, SceneFunction, Trunk};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Latent set with flow prior/posterior and projected local features.
    LaserNv,
    /// Latent set without local features.
    LaserNoGeom,
    /// Deterministic: local features only.
    Mvcn,
    /// One Gaussian latent vector with conditional prior and posterior.
    CondNerfVae,
    /// One latent vector with a standard-normal prior.
    NerfVae,
}

impl Variant {
    pub fn is_generative(self) -> bool {
        self != Variant::Mvcn
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::LaserNv => "laser-nv",
            Variant::LaserNoGeom => "laser-no-geom",
            Variant::Mvcn => "mvcn",
            Variant::CondNerfVae => "cond-nerf-vae",
            Variant::NerfVae => "nerf-vae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Latent set size `K` (ignored by the single-vector variants).
    pub latent_k: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub prior_layers: usize,
    pub posterior_layers: usize,
    pub flow_width: usize,
    pub latent_layers: usize,
    pub integrate_layers: usize,
    pub local_hidden: usize,
    pub local_blocks: usize,
    pub out_hidden: usize,
    pub out_layers: usize,
    pub vector_hidden: usize,
    pub gaussian_hidden: usize,
    pub background: BackgroundKind,
    pub bg_hidden: usize,
    pub pos_enc: EncodingRange,
    pub dir_enc: EncodingRange,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_k", self.latent_k),
            ("latent_dim", self.latent_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("flow_width", self.flow_width),
            ("local_hidden", self.local_hidden),
            ("out_hidden", self.out_hidden),
            ("out_layers", self.out_layers),
            ("vector_hidden", self.vector_hidden),
            ("gaussian_hidden", self.gaussian_hidden),
            ("bg_hidden", self.bg_hidden),
            ("encoder.levels", self.encoder.levels),
            ("encoder.base_channels", self.encoder.base_channels),
            ("encoder.groups", self.encoder.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::config(format!("model.latent_dim must be even, got {}", self.latent_dim)));
        }
        if self.model_dim % self.heads != 0 || self.flow_width % self.heads != 0 {
            return Err(Error::config("model.model_dim and model.flow_width must be divisible by model.heads"));
        }
        if self.encoder.base_channels % self.encoder.groups != 0 {
            return Err(Error::config("encoder.base_channels must be divisible by encoder.groups"));
        }
        for (name, r) in [("pos_enc", self.pos_enc), ("dir_enc", self.dir_enc)] {
            if r.l_min > r.l_max {
                return Err(Error::config(format!("model.{name}: l_min > l_max")));
            }
        }
        Ok(())
    }

    fn scene_config(&self) -> SceneFnConfig {
        let trunk = match self.variant {
            Variant::LaserNv => Trunk::LatentSet { local_features: true },
            Variant::LaserNoGeom => Trunk::LatentSet { local_features: false },
            Variant::Mvcn => Trunk::ViewsOnly,
            Variant::CondNerfVae | Variant::NerfVae => Trunk::LatentVector,
        };
        SceneFnConfig {
            trunk,
            pos_enc: self.pos_enc,
            dir_enc: self.dir_enc,
            latent_dim: self.latent_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            latent_layers: self.latent_layers,
            integrate_layers: self.integrate_layers,
            local_hidden: self.local_hidden,
            local_blocks: self.local_blocks,
            stack_channels: self.encoder.stack_channels(),
            token_dim: self.encoder.token_dim(),
            out_hidden: self.out_hidden,
            out_layers: self.out_layers,
            vector_hidden: self.vector_hidden,
            background: self.background,
            bg_hidden: self.bg_hidden,
        }
    }
}

/// Diagonal Gaussian over one latent vector, from mean-pooled context tokens.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub layers: Vec<Linear>,
    pub out: Linear,
    pub dim: usize,
}

impl GaussianHead {
    fn new(b: &mut Builder<'_>, token_dim: usize, hidden: usize, dim: usize) -> Self {
        Self {
            layers: vec![Linear::dense(b, "fc0", token_dim, hidden), Linear::dense(b, "fc1", hidden, hidden)],
            out: Linear::new(b, "out", hidden, 2 * dim, Init::Zero, true),
            dim,
        }
    }

    /// `(mean, log_std)`, each `[1, D]`.
    fn moments<'t, T: Real>(&self, tokens: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let mut h = tokens.mean_axis(0, true);
        for l in &self.layers {
            h = l.forward(h).relu();
        }
        let o = self.out.forward(h);
        let log_std = o.narrow(1, self.dim, self.dim).scale(1.0 / SCALE_CLAMP).tanh().scale(SCALE_CLAMP);
        (o.narrow(1, 0, self.dim), log_std)
    }
}

fn gaussian_logprob<'t, T: Real>(z: Var<'t, T>, mean: Var<'t, T>, log_std: Var<'t, T>) -> Var<'t, T> {
    let n = z.value().numel() as f64;
    let u = z.sub(mean).div(log_std.exp());
    u.square().sum().scale(-0.5).sub(log_std.sum()).add_scalar(-0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// A distribution over the latent representation of a scene.
#[derive(Clone, Debug)]
pub enum LatentDist {
    Flow(SetFlow),
    Gaussian(GaussianHead),
    StandardNormal { dim: usize },
    None,
}

/// A latent draw with its log density under the distribution that produced it.
pub struct LatentDraw<'t, T: Real> {
    pub z: Var<'t, T>,
    pub logprob: Var<'t, T>,
}

impl LatentDist {
    /// `tokens`: conditioning set `[Nt, token_dim]`.
    pub fn sample<'t, T: Real>(
        &self,
        tape: &'t Tape<'t, T>,
        tokens: Var<'t, T>,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Option<LatentDraw<'t, T>>> {
        Ok(match self {
            LatentDist::Flow(flow) => {
                let (z, logprob) = flow.sample(tape, tokens, k, rng)?;
                Some(LatentDraw { z, logprob })
            }
            LatentDist::Gaussian(head) => {
                let (mean, log_std) = head.moments(tokens);
                let eps = tape.constant(base_sample(1, head.dim, rng));
                let z = mean.add(eps.mul(log_std.exp()));
                let logprob = gaussian_logprob(z, mean, log_std);
                Some(LatentDraw { z, logprob })
            }
            LatentDist::StandardNormal { dim } => {
                let z = tape.constant(base_sample(1, *dim, rng));
                Some(LatentDraw { z, logprob: base_logprob(z) })
            }
            LatentDist::None => None,
        })
    }

    pub fn logprob<'t, T: Real>(&self, z: Var<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            LatentDist::Flow(flow) => flow.logprob(z, tokens),
            LatentDist::Gaussian(head) => {
                let (mean, log_std) = head.moments(tokens);
                Ok(gaussian_logprob(z, mean, log_std))
            }
            LatentDist::StandardNormal { .. } => Ok(base_logprob(z)),
            LatentDist::None => Err(Error::Unsupported("this variant has no latent distribution".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub prior: LatentDist,
    pub posterior: LatentDist,
    pub scene: SceneFunction,
}

/// Sample depths of a batch of rays: `coarse [R, Sc]` and, when a fine pass
/// ran, the merged sorted `fine [R, Sc + Sf]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPlan {
    pub coarse: Vec<f64>,
    pub fine: Option<Vec<f64>>,
}

/// Where sample depths come from.
pub enum Depths<'a> {
    /// Stratified coarse samples and inverse-CDF fine samples.
    Draw(&'a mut ChaCha8Rng),
    /// Replays a previous plan, making the rendering a smooth function of the parameters.
    Fixed(&'a DepthPlan),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOpts {
    pub n_coarse: usize,
    pub n_fine: usize,
}

pub struct Rendered<'t, T: Real> {
    pub coarse: Composite<'t, T>,
    pub fine: Option<Composite<'t, T>>,
    /// Densities of every evaluated sample, both passes, flattened.
    pub sigmas: Vec<Var<'t, T>>,
    pub plan: DepthPlan,
}

impl<'t, T: Real> Rendered<'t, T> {
    /// The final (fine when present) rendering.
    pub fn output(&self) -> &Composite<'t, T> {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

fn ray_points<'t, T: Real>(tape: &'t Tape<'t, T>, rays: &[Ray], depths: &[f64], s: usize, cfg: &SceneFnConfig) -> Points<'t, T> {
    let mut x = Vec::with_capacity(depths.len() * 3);
    let mut d = Vec::with_capacity(depths.len() * 3);
    for (ray, ts) in rays.iter().zip(depths.chunks(s)) {
        for &t in ts {
            let p = ray.at(t);
            x.extend([p.x, p.y, p.z]);
            d.extend([ray.direction.x, ray.direction.y, ray.direction.z]);
        }
    }
    let n = depths.len();
    let x = tape.constant(Tensor::from_f64(vec![n, 3], &x));
    let d = tape.constant(Tensor::from_f64(vec![n, 3], &d));
    Points::new(x, d, cfg)
}

impl Model {
    /// Builds the model for `cfg` with parameters drawn from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamTree<f32>)> {
        cfg.validate()?;
        let mut params = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut b, "encoder", cfg.encoder.clone());
        let token_dim = cfg.encoder.token_dim();
        let flow = |b: &mut Builder<'_>, name: &str, layers: usize, direction: Direction| {
            let fc = FlowConfig {
                dim: cfg.latent_dim,
                model_dim: cfg.flow_width,
                heads: cfg.heads,
                layers,
                ctx_dim: token_dim,
                direction,
            };
            LatentDist::Flow(SetFlow::new(b, name, fc))
        };
        let gaussian = |b: &mut Builder<'_>, name: &str| {
            LatentDist::Gaussian(GaussianHead::new(&mut b.sub(name), token_dim, cfg.gaussian_hidden, cfg.latent_dim))
        };
        let (prior, posterior) = match cfg.variant {
            // Sampling from the prior inverts its chain; the posterior samples forward.
            Variant::LaserNv | Variant::LaserNoGeom => (
                flow(&mut b, "prior", cfg.prior_layers, Direction::Inverted),
                flow(&mut b, "posterior", cfg.posterior_layers, Direction::Forward),
            ),
            Variant::Mvcn => (LatentDist::None, LatentDist::None),
            Variant::CondNerfVae => (gaussian(&mut b, "prior"), gaussian(&mut b, "posterior")),
            Variant::NerfVae => (LatentDist::StandardNormal { dim: cfg.latent_dim }, gaussian(&mut b, "posterior")),
        };
        let scene = SceneFunction::new(&mut b, "scene", cfg.scene_config())?;
        Ok((Self { cfg: cfg.clone(), encoder, prior, posterior, scene }, params))
    }

    /// Encodes views given as row-major RGB images in `[0, 1]`.
    pub fn encode<'t, T: Real>(&self, tape: &'t Tape<'t, T>, images: &[&[f32]], cameras: &[Camera]) -> Result<FeaturePyramid<'t, T>> {
        if images.is_empty() || images.len() != cameras.len() {
            return Err(Error::domain("need one camera per image and at least one view"));
        }
        let (w, h) = (cameras[0].width, cameras[0].height);
        if cameras.iter().any(|c| c.width != w || c.height != h) {
            return Err(Error::domain("all views must share an image size"));
        }
        let mut data = Vec::with_capacity(images.len() * w * h * 9);
        for (img, cam) in images.iter().zip(cameras) {
            if img.len() != w * h * 3 {
                return Err(Error::domain(format!("image has {} values, expected {}", img.len(), w * h * 3)));
            }
            data.extend_from_slice(view_input::<T>(img, cam).data());
        }
        let input = tape.constant(Tensor::new(vec![images.len(), h, w, 9], data));
        self.encoder.encode(input)
    }

    /// Samples the latent representation. `pyramid` holds the conditioning views.
    pub fn sample_latents<'t, T: Real>(
        &self,
        dist: &LatentDist,
        pyramid: &FeaturePyramid<'t, T>,
        rng: &mut impl Rng,
    ) -> Result<Option<LatentDraw<'t, T>>> {
        let tape = pyramid.levels[0].tape();
        dist.sample(tape, pyramid.context_tokens(), self.cfg.latent_k, rng)
    }

    pub fn latents<'t, T: Real>(&self, draw: Option<&LatentDraw<'t, T>>) -> Latents<'t, T> {
        match (draw, self.scene.cfg.trunk) {
            (None, _) => Latents::None,
            (Some(d), Trunk::LatentVector) => Latents::Vector(d.z),
            (Some(d), _) => Latents::Set(d.z),
        }
    }

    /// Scene conditioning from the context-view pyramid and their cameras.
    pub fn condition<'t, T: Real>(
        &self,
        context: &FeaturePyramid<'t, T>,
        cameras: &[Camera],
        latents: Latents<'t, T>,
    ) -> SceneCond<'t, T> {
        SceneCond {
            latents,
            views: self.scene.view_maps(context, cameras),
            tokens: (self.cfg.background == BackgroundKind::Context).then(|| context.context_tokens()),
        }
    }

    /// Renders a batch of rays with a coarse and (when `n_fine > 0`) a fine pass.
    /// Latent attention and local features of the coarse points are reused by the fine pass.
    pub fn render_rays<'t, T: Real>(
        &self,
        cond: &SceneCond<'t, T>,
        rays: &[Ray],
        opts: RenderOpts,
        depths: Depths<'_>,
    ) -> Result<Rendered<'t, T>> {
        let sc = opts.n_coarse;
        if rays.is_empty() || sc == 0 {
            return Err(Error::domain("need at least one ray and one coarse sample"));
        }
        let r = rays.len();
        let tape = any_var(cond).tape();
        let scene = &self.scene;
        let t_far: Vec<f64> = rays.iter().map(|ray| ray.t_far).collect();
        let (coarse_d, fixed_fine, mut rng) = match depths {
            Depths::Draw(rng) => {
                let d: Vec<f64> = rays.iter().flat_map(|ray| stratified_samples(ray, sc, rng)).collect();
                (d, None, Some(rng))
            }
            Depths::Fixed(plan) => {
                if plan.coarse.len() != r * sc || (opts.n_fine > 0) != plan.fine.is_some() {
                    return Err(Error::domain("depth plan does not match the render options"));
                }
                (plan.coarse.clone(), plan.fine.clone(), None)
            }
        };
        let dirs: Vec<f64> = rays.iter().flat_map(|ray| [ray.direction.x, ray.direction.y, ray.direction.z]).collect();
        let bg = scene.background(tape.constant(Tensor::from_f64(vec![r, 3], &dirs)), cond)?;

        let pts_c = ray_points(tape, rays, &coarse_d, sc, &scene.cfg);
        let f_c = scene.features(&pts_c, cond)?;
        let rad_c = scene.output(Pass::Coarse).forward(&pts_c, f_c);
        check_radiance(&rad_c.sigma, &rad_c.rgb)?;
        let coarse = composite(rad_c.sigma.reshape(vec![r, sc]), rad_c.rgb.reshape(vec![r, sc, 3]), &coarse_d, &t_far, bg);
        let mut sigmas = vec![rad_c.sigma];
        if opts.n_fine == 0 {
            return Ok(Rendered { coarse, fine: None, sigmas, plan: DepthPlan { coarse: coarse_d, fine: None } });
        }

        let s = sc + opts.n_fine;
        let shared = scene.cfg.trunk == Trunk::LatentVector;
        let (merged, pts, f) = if let Some(merged) = fixed_fine {
            if merged.len() != r * s {
                return Err(Error::domain("depth plan does not match the render options"));
            }
            let pts = ray_points(tape, rays, &merged, s, &scene.cfg);
            let f = if shared { f_c } else { scene.features(&pts, cond)? };
            (merged, pts, f)
        } else {
            let rng = rng.take().expect("drawing depths");
            let w = coarse.weights.value().to_f64_vec();
            let mut new = Vec::with_capacity(r * opts.n_fine);
            let mut merged = Vec::with_capacity(r * s);
            let mut perm = Vec::with_capacity(r * s);
            for (i, ray) in rays.iter().enumerate() {
                let cd = &coarse_d[i * sc..(i + 1) * sc];
                let nd = inverse_cdf_samples(&w[i * sc..(i + 1) * sc], cd, ray.t_near, ray.t_far, opts.n_fine, rng);
                // Source rows: coarse points first, then the new ones.
                let mut tagged: Vec<(f64, usize)> = cd.iter().enumerate().map(|(j, &t)| (t, i * sc + j)).collect();
                tagged.extend(nd.iter().enumerate().map(|(j, &t)| (t, r * sc + i * opts.n_fine + j)));
                tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
                merged.extend(tagged.iter().map(|p| p.0));
                perm.extend(tagged.iter().map(|p| p.1));
                new.extend(nd);
            }
            let pts_n = ray_points(tape, rays, &new, opts.n_fine, &scene.cfg);
            let perm = Rc::new(perm);
            let pick = |a: Var<'t, T>, b: Var<'t, T>| tape.concat(&[a, b], 0).index_select(perm.clone());
            let pts = Points {
                x: pick(pts_c.x, pts_n.x),
                d: pick(pts_c.d, pts_n.d),
                gx: pick(pts_c.gx, pts_n.gx),
                gd: pick(pts_c.gd, pts_n.gd),
            };
            let f = if shared { f_c } else { pick(f_c, scene.features(&pts_n, cond)?) };
            (merged, pts, f)
        };
        let rad = scene.output(Pass::Fine).forward(&pts, f);
        check_radiance(&rad.sigma, &rad.rgb)?;
        let fine = composite(rad.sigma.reshape(vec![r, s]), rad.rgb.reshape(vec![r, s, 3]), &merged, &t_far, bg);
        sigmas.push(rad.sigma);
        Ok(Rendered { coarse, fine: Some(fine), sigmas, plan: DepthPlan { coarse: coarse_d, fine: Some(merged) } })
    }

    /// Scene function at explicit points with the fine output head.
    pub fn query_points<'t, T: Real>(
        &self,
        cond: &SceneCond<'t, T>,
        x: &[[f64; 3]],
        d: &[[f64; 3]],
    ) -> Result<crate::scenefn::Radiance<'t, T>> {
        let tape = any_var(cond).tape();
        let n = x.len();
        let xs: Vec<f64> = x.iter().flatten().copied().collect();
        let ds: Vec<f64> = d.iter().flatten().copied().collect();
        let pts = Points::new(
            tape.constant(Tensor::from_f64(vec![n, 3], &xs)),
            tape.constant(Tensor::from_f64(vec![n, 3], &ds)),
            &self.scene.cfg,
        );
        self.scene.evaluate(&pts, cond, Pass::Fine)
    }
}

fn check_radiance<T: Real>(sigma: &Var<'_, T>, rgb: &Var<'_, T>) -> Result<()> {
    if sigma.value().all_finite() && rgb.value().all_finite() {
        Ok(())
    } else {
        Err(Error::numeric("non-finite density or colour from the scene function"))
    }
}

/// Any variable of the conditioning, to recover its tape.
fn any_var<'a, 't, T: Real>(cond: &'a SceneCond<'t, T>) -> Var<'t, T> {
    match cond.latents {
        Latents::Set(z) | Latents::Vector(z) => z,
        Latents::None => cond
            .views
            .as_ref()
            .map(|v| v.maps)
            .or(cond.tokens)
            .expect("conditioning without latents carries view features"),
    }
}
