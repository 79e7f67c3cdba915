//! The conditional radiance field `F(x, d, Z, H) -> (rgb, sigma)`.
//!
//! A point is described by a conditioning vector `f` built by one of three
//! trunks, then decoded by a pass-specific output MLP:
//!
//! * set latents: the encoded point queries the latent set, and the result
//!   attends over its own projected local features (when enabled);
//! * view features only: the encoded point attends over its local features
//!   and a learned null token that is used when no view sees the point;
//! * a single latent vector, projected once and shared by every point.

use std::rc::Rc;

use lasernv_tensor::{ParamId, Real, Tensor, Var};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::attention::{Attention, Mask};
use crate::geometry::{Camera, EncodingRange};
use crate::nn::{encode, Builder, Init, Linear};
use crate::{Error, Result};

/// Upper bound of the density.
pub const SIGMA_MAX: f64 = 10.0;
/// Initial bias of the density pre-activation, so scenes start mostly empty.
pub const SIGMA_BIAS_INIT: f32 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    /// White.
    Constant,
    /// Cross-attention from the encoded direction into the latent set.
    Latent,
    /// Latent attention (when latents exist), then attention into the context tokens, then an MLP.
    Context,
    /// MLP of the encoded direction and a latent vector.
    Mlp,
}

/// What conditions the scene function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trunk {
    /// Latent set, with or without projected local features.
    LatentSet { local_features: bool },
    /// Local features only, no latents.
    ViewsOnly,
    /// A single latent vector.
    LatentVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFnConfig {
    pub trunk: Trunk,
    pub pos_enc: EncodingRange,
    pub dir_enc: EncodingRange,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub latent_layers: usize,
    pub integrate_layers: usize,
    pub local_hidden: usize,
    pub local_blocks: usize,
    pub stack_channels: usize,
    pub token_dim: usize,
    pub out_hidden: usize,
    pub out_layers: usize,
    pub vector_hidden: usize,
    pub background: BackgroundKind,
    pub bg_hidden: usize,
}

impl SceneFnConfig {
    /// Width of the conditioning vector `f`.
    pub fn cond_dim(&self) -> usize {
        match self.trunk {
            Trunk::LatentVector => self.vector_hidden,
            _ => self.model_dim,
        }
    }

    pub fn uses_local_features(&self) -> bool {
        matches!(self.trunk, Trunk::LatentSet { local_features: true } | Trunk::ViewsOnly)
    }
}

/// Per-view feature MLP applied to bilinearly sampled stack features.
#[derive(Clone, Debug)]
pub struct LocalFeatures {
    /// Projection of the stacked features, applied at map level.
    pub input: Linear,
    /// Projection of the encoded view-space position and direction.
    pub geometry: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub out: Linear,
}

/// Residual swish MLP: a density half and a colour half, with `f`
/// projected into every layer.
#[derive(Clone, Debug)]
pub struct OutputMlp {
    pub pos_in: Linear,
    pub cond: Linear,
    pub density: Vec<Linear>,
    pub sigma_head: Linear,
    pub color_in: Linear,
    pub color: Vec<Linear>,
    pub rgb_head: Linear,
}

#[derive(Clone, Debug)]
pub enum Background {
    Constant,
    Latent { query: Linear, attn: Attention, out: Linear },
    Context { query: Linear, latent_attn: Option<Attention>, ctx_attn: Attention, layers: Vec<Linear>, dir_proj: Vec<Linear>, out: Linear },
    Mlp { layers: Vec<Linear>, out: Linear },
}

#[derive(Clone, Debug)]
pub struct SceneFunction {
    pub cfg: SceneFnConfig,
    /// Encoded position to model width (query of the latent or view attention).
    pub query: Option<Linear>,
    pub latent_attn: Option<Attention>,
    pub local: Option<LocalFeatures>,
    pub integrate: Option<Attention>,
    pub null_token: Option<ParamId>,
    pub vector_proj: Option<Linear>,
    pub coarse: OutputMlp,
    pub fine: OutputMlp,
    pub background: Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Coarse,
    Fine,
}

/// Latent representation of one scene.
#[derive(Clone, Copy)]
pub enum Latents<'t, T: Real> {
    /// `[K, D]`
    Set(Var<'t, T>),
    /// `[1, D]`
    Vector(Var<'t, T>),
    None,
}

/// Context views as seen by the local-feature branch.
#[derive(Clone)]
pub struct ViewMaps<'t, T: Real> {
    pub cameras: Vec<Camera>,
    /// Projected feature stacks `[N, h, w, local_hidden]`.
    pub maps: Var<'t, T>,
}

/// Everything the scene function needs about one scene.
#[derive(Clone)]
pub struct SceneCond<'t, T: Real> {
    pub latents: Latents<'t, T>,
    pub views: Option<ViewMaps<'t, T>>,
    /// Context tokens `[Nt, token_dim]`, used by the context background.
    pub tokens: Option<Var<'t, T>>,
}

/// Density pre-activation, density and colour of a batch of points.
pub struct Radiance<'t, T: Real> {
    /// `[P]`
    pub sigma_logit: Var<'t, T>,
    /// `[P]`, in `[0, SIGMA_MAX]`.
    pub sigma: Var<'t, T>,
    /// `[P, 3]`, in `[0, 1]`.
    pub rgb: Var<'t, T>,
}

/// Encoded query points, shared between the trunk and both output MLPs.
#[derive(Clone, Copy)]
pub struct Points<'t, T: Real> {
    /// `[P, 3]`
    pub x: Var<'t, T>,
    /// `[P, 3]`, unit.
    pub d: Var<'t, T>,
    pub gx: Var<'t, T>,
    pub gd: Var<'t, T>,
}

impl<'t, T: Real> Points<'t, T> {
    pub fn new(x: Var<'t, T>, d: Var<'t, T>, cfg: &SceneFnConfig) -> Self {
        Self { x, d, gx: encode(x, cfg.pos_enc), gd: encode(d, cfg.dir_enc) }
    }

    pub fn len(&self) -> usize {
        self.x.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl OutputMlp {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &SceneFnConfig) -> Self {
        let mut s = b.sub(name);
        let h = cfg.out_hidden;
        let n = cfg.out_layers;
        let pos_in = Linear::dense(&mut s, "pos_in", cfg.pos_enc.width3(), h);
        let cond = Linear::new(&mut s, "cond", cfg.cond_dim(), 2 * n * h, Init::Fan(1.0), false);
        let density = (1..n).map(|i| Linear::new(&mut s, &format!("density{i}"), h, h, Init::Fan(0.5), true)).collect();
        let mut sigma_head = Linear::dense(&mut s, "sigma", h, 1);
        let bias = s.constant("sigma_bias", &[1], SIGMA_BIAS_INIT);
        sigma_head.b = Some(bias);
        let color_in = Linear::dense(&mut s, "color_in", h + cfg.dir_enc.width3(), h);
        let color = (1..n).map(|i| Linear::new(&mut s, &format!("color{i}"), h, h, Init::Fan(0.5), true)).collect();
        let rgb_head = Linear::dense(&mut s, "rgb", h, 3);
        Self { pos_in, cond, density, sigma_head, color_in, color, rgb_head }
    }

    /// `f: [P, F]` or `[1, F]` (shared by all points).
    pub fn forward<'t, T: Real>(&self, pts: &Points<'t, T>, f: Var<'t, T>) -> Radiance<'t, T> {
        let n = self.density.len() + 1;
        let h = self.pos_in.fan_out;
        let c = self.cond.forward(f);
        let part = |i: usize| c.narrow(1, i * h, h);
        let mut x = self.pos_in.forward(pts.gx).add(part(0)).silu();
        for (i, l) in self.density.iter().enumerate() {
            x = x.add(l.forward(x).add(part(i + 1)).silu());
        }
        let p = x.dim(0);
        let sigma_logit = self.sigma_head.forward(x).reshape(vec![p]);
        let sigma = sigma_logit.sigmoid().scale(SIGMA_MAX);
        let tape = x.tape();
        let mut y = self.color_in.forward(tape.concat(&[x, pts.gd], 1)).add(part(n)).silu();
        for (i, l) in self.color.iter().enumerate() {
            y = y.add(l.forward(y).add(part(n + i + 1)).silu());
        }
        let rgb = self.rgb_head.forward(y).sigmoid();
        Radiance { sigma_logit, sigma, rgb }
    }
}

/// Row-major `M^T` as a constant `[3, 3]` tensor.
fn mat3_t<T: Real>(m: &nalgebra::Matrix3<f64>) -> Tensor<T> {
    Tensor::from_fn(vec![3, 3], |i| T::of(m[(i % 3, i / 3)]))
}

/// Bilinear lookup of `[P]` continuous texel coordinates `(us, vs)` (texel
/// centers at integer + 0.5) into the map `view` of `maps: [N, h, w, C]`.
/// Edge-clamped. Differentiable in both the map and the coordinates.
pub fn bilinear_gather<'t, T: Real>(maps: Var<'t, T>, view: usize, us: Var<'t, T>, vs: Var<'t, T>) -> Var<'t, T> {
    let tape = maps.tape();
    let s = maps.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let flat = maps.reshape(vec![s[0] * h * w, c]);
    let p = us.dim(0);
    let fx = us.add_scalar(-0.5);
    let fy = vs.add_scalar(-0.5);
    let (fxv, fyv) = (fx.value(), fy.value());
    let mut idx = [Vec::with_capacity(p), Vec::with_capacity(p), Vec::with_capacity(p), Vec::with_capacity(p)];
    let mut floor_x = Vec::with_capacity(p);
    let mut floor_y = Vec::with_capacity(p);
    let base = view * h * w;
    for i in 0..p {
        let (x, y) = (fxv.data()[i].as_f64(), fyv.data()[i].as_f64());
        let (x, y) = (if x.is_finite() { x } else { 0.0 }, if y.is_finite() { y } else { 0.0 });
        let (x0, y0) = (x.floor(), y.floor());
        floor_x.push(x0);
        floor_y.push(y0);
        let cx = |v: f64| (v.max(0.0) as usize).min(w - 1);
        let cy = |v: f64| (v.max(0.0) as usize).min(h - 1);
        let (ix0, ix1, iy0, iy1) = (cx(x0), cx(x0 + 1.0), cy(y0), cy(y0 + 1.0));
        idx[0].push(base + iy0 * w + ix0);
        idx[1].push(base + iy0 * w + ix1);
        idx[2].push(base + iy1 * w + ix0);
        idx[3].push(base + iy1 * w + ix1);
    }
    let a = fx.sub(tape.constant(Tensor::from_f64(vec![p], &floor_x))).reshape(vec![p, 1]);
    let b = fy.sub(tape.constant(Tensor::from_f64(vec![p], &floor_y))).reshape(vec![p, 1]);
    let one_a = a.neg().add_scalar(1.0);
    let one_b = b.neg().add_scalar(1.0);
    let [i00, i01, i10, i11] = idx.map(Rc::new);
    let c00 = flat.index_select(i00).mul(one_a.mul(one_b));
    let c01 = flat.index_select(i01).mul(a.mul(one_b));
    let c10 = flat.index_select(i10).mul(one_a.mul(b));
    let c11 = flat.index_select(i11).mul(a.mul(b));
    c00.add(c01).add(c10).add(c11)
}

/// Bilinear sample of one `[h, w, C]` map at a texel-space position.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, uv: (f64, f64)) -> Vec<T> {
    let tape = lasernv_tensor::Tape::new();
    let s = map.shape();
    let m = tape.constant(map.clone().reshape(vec![1, s[0], s[1], s[2]]));
    let u = tape.constant(Tensor::from_f64(vec![1], &[uv.0]));
    let v = tape.constant(Tensor::from_f64(vec![1], &[uv.1]));
    bilinear_gather(m, 0, u, v).value().data().to_vec()
}

impl LocalFeatures {
    fn new(b: &mut Builder<'_>, cfg: &SceneFnConfig) -> Self {
        let mut s = b.sub("local");
        let h = cfg.local_hidden;
        let geo_w = cfg.pos_enc.width3() + cfg.dir_enc.width3();
        Self {
            input: Linear::dense(&mut s, "input", cfg.stack_channels, h),
            geometry: Linear::dense(&mut s, "geometry", geo_w, h),
            blocks: (0..cfg.local_blocks)
                .map(|i| {
                    let mut bs = s.sub(&format!("block{i}"));
                    (Linear::dense(&mut bs, "fc0", h, h), Linear::new(&mut bs, "fc1", h, h, Init::Fan(0.5), true))
                })
                .collect(),
            out: Linear::dense(&mut s, "out", h, cfg.model_dim),
        }
    }

    /// `(h_hat [P, N, model_dim], visible [P * N] point-major)`.
    pub fn forward<'t, T: Real>(&self, cfg: &SceneFnConfig, views: &ViewMaps<'t, T>, pts: &Points<'t, T>) -> (Var<'t, T>, Vec<bool>) {
        let tape = pts.x.tape();
        let p = pts.len();
        let n = views.cameras.len();
        let (mh, mw) = (views.maps.dim(1), views.maps.dim(2));
        let xv_vals = pts.x.value();
        let mut samples = Vec::with_capacity(n);
        let mut geo = Vec::with_capacity(n);
        let mut visible = vec![false; p * n];
        for (vi, cam) in views.cameras.iter().enumerate() {
            for i in 0..p {
                let q = &xv_vals.data()[i * 3..i * 3 + 3];
                let pt = Point3::new(q[0].as_f64(), q[1].as_f64(), q[2].as_f64());
                visible[i * n + vi] = cam.is_visible(&pt);
            }
            let rt = tape.constant(mat3_t(&cam.r));
            let t = tape.constant(Tensor::from_f64(vec![3], cam.t.as_slice()));
            let xc = pts.x.matmul(rt).add(t);
            let dc = pts.d.matmul(rt);
            let proj = xc.matmul(tape.constant(mat3_t(&cam.k)));
            // Points at or behind the camera plane get a harmless depth; they are masked anyway.
            let zv = proj.value();
            let fix: Vec<f64> = (0..p)
                .map(|i| {
                    let z = zv.data()[i * 3 + 2].as_f64();
                    if z > 1e-6 {
                        0.0
                    } else {
                        1.0 - z
                    }
                })
                .collect();
            let z = proj.narrow(1, 2, 1).reshape(vec![p]).add(tape.constant(Tensor::from_f64(vec![p], &fix)));
            let sx = mw as f64 / cam.width as f64;
            let sy = mh as f64 / cam.height as f64;
            let u = proj.narrow(1, 0, 1).reshape(vec![p]).div(z).scale(sx);
            let v = proj.narrow(1, 1, 1).reshape(vec![p]).div(z).scale(sy);
            samples.push(bilinear_gather(views.maps, vi, u, v));
            geo.push(tape.concat(&[encode(xc, cfg.pos_enc), encode(dc, cfg.dir_enc)], 1));
        }
        let sampled = tape.concat(&samples, 0);
        let geo = tape.concat(&geo, 0);
        let mut h = sampled.add(self.geometry.forward(geo));
        for (fc0, fc1) in &self.blocks {
            h = h.add(fc1.forward(fc0.forward(h.relu()).relu()));
        }
        let out = self.out.forward(h.relu());
        let dm = out.dim(1);
        (out.reshape(vec![n, p, dm]).permute(&[1, 0, 2]), visible)
    }
}

impl Background {
    fn new(b: &mut Builder<'_>, cfg: &SceneFnConfig) -> Result<Self> {
        let mut s = b.sub("background");
        let dw = cfg.dir_enc.width3();
        let has_set = matches!(cfg.trunk, Trunk::LatentSet { .. });
        Ok(match cfg.background {
            BackgroundKind::Constant => Background::Constant,
            BackgroundKind::Latent => {
                if !has_set {
                    return Err(Error::config("the latent background needs a latent set"));
                }
                Background::Latent {
                    query: Linear::dense(&mut s, "query", dw, cfg.model_dim),
                    attn: Attention::cross_attn(&mut s, "attn", cfg.model_dim, cfg.latent_dim, cfg.heads, 2),
                    out: Linear::dense(&mut s, "out", cfg.model_dim, 3),
                }
            }
            BackgroundKind::Context => {
                if cfg.trunk == Trunk::LatentVector {
                    return Err(Error::config("the context background needs a latent set or view features"));
                }
                let hd = cfg.bg_hidden;
                Background::Context {
                    query: Linear::dense(&mut s, "query", dw, cfg.model_dim),
                    latent_attn: has_set
                        .then(|| Attention::cross_attn(&mut s, "latent_attn", cfg.model_dim, cfg.latent_dim, cfg.heads, 1)),
                    ctx_attn: Attention::cross_attn(&mut s, "ctx_attn", cfg.model_dim, cfg.token_dim, cfg.heads, 1),
                    layers: vec![Linear::dense(&mut s, "fc0", cfg.model_dim, hd), Linear::dense(&mut s, "fc1", hd, hd)],
                    dir_proj: vec![
                        Linear::new(&mut s, "dir0", dw, hd, Init::Fan(1.0), false),
                        Linear::new(&mut s, "dir1", dw, hd, Init::Fan(1.0), false),
                    ],
                    out: Linear::dense(&mut s, "out", hd, 3),
                }
            }
            BackgroundKind::Mlp => {
                if cfg.trunk != Trunk::LatentVector {
                    return Err(Error::config("the MLP background needs a latent vector"));
                }
                let hd = cfg.bg_hidden;
                Background::Mlp {
                    layers: vec![Linear::dense(&mut s, "fc0", dw + cfg.latent_dim, hd), Linear::dense(&mut s, "fc1", hd, hd)],
                    out: Linear::dense(&mut s, "out", hd, 3),
                }
            }
        })
    }

    /// Colours `[R, 3]` for encoded directions `gd: [R, dir_width]`.
    pub fn forward<'t, T: Real>(&self, gd: Var<'t, T>, cond: &SceneCond<'t, T>) -> Result<Var<'t, T>> {
        let tape = gd.tape();
        let r = gd.dim(0);
        match self {
            Background::Constant => Ok(tape.constant(Tensor::ones(vec![1, 3])).broadcast_to(&[r, 3])),
            Background::Latent { query, attn, out } => {
                let Latents::Set(z) = cond.latents else {
                    return Err(Error::domain("latent background evaluated without a latent set"));
                };
                let q = query.forward(gd);
                let dm = q.dim(1);
                let h = attn.cross_forward(q.reshape(vec![1, r, dm]), z.reshape(vec![1, z.dim(0), z.dim(1)]), None)?;
                Ok(out.forward(h.reshape(vec![r, dm])).sigmoid())
            }
            Background::Context { query, latent_attn, ctx_attn, layers, dir_proj, out } => {
                let q = query.forward(gd);
                let dm = q.dim(1);
                let mut h = q.reshape(vec![1, r, dm]);
                if let Some(attn) = latent_attn {
                    let Latents::Set(z) = cond.latents else {
                        return Err(Error::domain("context background evaluated without a latent set"));
                    };
                    h = attn.cross_forward(h, z.reshape(vec![1, z.dim(0), z.dim(1)]), None)?;
                }
                let tokens = cond.tokens.ok_or_else(|| Error::domain("context background needs context tokens"))?;
                h = ctx_attn.cross_forward(h, tokens.reshape(vec![1, tokens.dim(0), tokens.dim(1)]), None)?;
                let mut x = h.reshape(vec![r, dm]);
                for (l, dp) in layers.iter().zip(dir_proj) {
                    x = l.forward(x).add(dp.forward(gd)).relu();
                }
                Ok(out.forward(x).sigmoid())
            }
            Background::Mlp { layers, out } => {
                let Latents::Vector(z) = cond.latents else {
                    return Err(Error::domain("MLP background evaluated without a latent vector"));
                };
                let zb = z.broadcast_to(&[r, z.dim(1)]);
                let mut x = tape.concat(&[gd, zb], 1);
                for l in layers {
                    x = l.forward(x).relu();
                }
                Ok(out.forward(x).sigmoid())
            }
        }
    }
}

impl SceneFunction {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: SceneFnConfig) -> Result<Self> {
        let mut s = b.sub(name);
        let pw = cfg.pos_enc.width3();
        let dm = cfg.model_dim;
        let (mut query, mut latent_attn, mut local, mut integrate, mut null_token, mut vector_proj) =
            (None, None, None, None, None, None);
        match cfg.trunk {
            Trunk::LatentSet { local_features } => {
                query = Some(Linear::dense(&mut s, "query", pw, dm));
                latent_attn = Some(Attention::cross_attn(&mut s, "latent_attn", dm, cfg.latent_dim, cfg.heads, cfg.latent_layers));
                if local_features {
                    local = Some(LocalFeatures::new(&mut s, &cfg));
                }
                integrate = Some(Attention::cross_attn(&mut s, "integrate", dm, dm, cfg.heads, cfg.integrate_layers));
            }
            Trunk::ViewsOnly => {
                query = Some(Linear::dense(&mut s, "query", pw, dm));
                local = Some(LocalFeatures::new(&mut s, &cfg));
                integrate = Some(Attention::cross_attn(&mut s, "integrate", dm, dm, cfg.heads, cfg.integrate_layers));
                null_token = Some(s.normal("null_token", &[dm], 1.0));
            }
            Trunk::LatentVector => {
                vector_proj = Some(Linear::dense(&mut s, "latent_proj", cfg.latent_dim, cfg.vector_hidden));
            }
        }
        let coarse = OutputMlp::new(&mut s, "out_coarse", &cfg);
        let fine = OutputMlp::new(&mut s, "out_fine", &cfg);
        let background = Background::new(&mut s, &cfg)?;
        Ok(Self { cfg, query, latent_attn, local, integrate, null_token, vector_proj, coarse, fine, background })
    }

    /// Projects each view's feature stack for the local-feature branch.
    /// `pyramid` holds the context views in the order of `cameras`.
    pub fn view_maps<'t, T: Real>(
        &self,
        pyramid: &crate::encoder::FeaturePyramid<'t, T>,
        cameras: &[Camera],
    ) -> Option<ViewMaps<'t, T>> {
        let local = self.local.as_ref()?;
        let tape = pyramid.levels[0].tape();
        let mut maps = pyramid.project_stack(tape.param(local.input.w));
        if let Some(bias) = local.input.b {
            maps = maps.add(tape.param(bias));
        }
        Some(ViewMaps { cameras: cameras.to_vec(), maps })
    }

    /// Latent features `z~ [P, model_dim]` of the encoded points.
    pub fn query_latent<'t, T: Real>(&self, pts: &Points<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let (Some(query), Some(attn)) = (&self.query, &self.latent_attn) else {
            return Err(Error::domain("this scene function has no latent attention"));
        };
        if z.shape().len() != 2 || z.dim(0) == 0 {
            return Err(Error::domain("latent set must be a nonempty [K, D] tensor"));
        }
        let p = pts.len();
        let q = query.forward(pts.gx);
        let dm = q.dim(1);
        let out = attn.cross_forward(q.reshape(vec![1, p, dm]), z.reshape(vec![1, z.dim(0), z.dim(1)]), None)?;
        Ok(out.reshape(vec![p, dm]))
    }

    /// Conditioning vectors `f` of the points: `[P, F]`, or `[1, F]` for a latent vector.
    pub fn features<'t, T: Real>(&self, pts: &Points<'t, T>, cond: &SceneCond<'t, T>) -> Result<Var<'t, T>> {
        let tape = pts.x.tape();
        let p = pts.len();
        let dm = self.cfg.model_dim;
        match self.cfg.trunk {
            Trunk::LatentSet { local_features } => {
                let Latents::Set(z) = cond.latents else {
                    return Err(Error::domain("scene function expects a latent set"));
                };
                let zt = self.query_latent(pts, z)?;
                let query = zt.reshape(vec![p, 1, dm]);
                let integrate = self.integrate.as_ref().expect("latent-set trunk has an integrator");
                let f = if local_features {
                    let views = cond.views.as_ref().ok_or_else(|| Error::domain("local features need context views"))?;
                    let (h_hat, visible) = self.local.as_ref().expect("local branch").forward(&self.cfg, views, pts);
                    self.integrate_features(integrate, query, h_hat, &visible, None)?
                } else {
                    integrate.cross_forward(query, query, None)?
                };
                Ok(f.reshape(vec![p, dm]))
            }
            Trunk::ViewsOnly => {
                let views = cond.views.as_ref().ok_or_else(|| Error::domain("local features need context views"))?;
                let q = self.query.as_ref().expect("query").forward(pts.gx).reshape(vec![p, 1, dm]);
                let (h_hat, visible) = self.local.as_ref().expect("local branch").forward(&self.cfg, views, pts);
                let null = tape.param(self.null_token.expect("null token")).reshape(vec![1, 1, dm]).broadcast_to(&[p, 1, dm]);
                let f = self.integrate_features(self.integrate.as_ref().expect("integrator"), q, h_hat, &visible, Some(null))?;
                Ok(f.reshape(vec![p, dm]))
            }
            Trunk::LatentVector => {
                let Latents::Vector(z) = cond.latents else {
                    return Err(Error::domain("scene function expects a latent vector"));
                };
                Ok(self.vector_proj.as_ref().expect("latent projection").forward(z).relu())
            }
        }
    }

    /// Attention of `query [P, 1, dm]` over the visible local features plus
    /// one extra token per point: the query itself, or the null token which
    /// is only visible when no view sees the point.
    fn integrate_features<'t, T: Real>(
        &self,
        integrate: &Attention,
        query: Var<'t, T>,
        h_hat: Var<'t, T>,
        visible: &[bool],
        null: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let tape = query.tape();
        let (p, n) = (h_hat.dim(0), h_hat.dim(1));
        let extra = null.unwrap_or(query);
        let ctx = tape.concat(&[h_hat, extra], 1);
        let mut allow = Vec::with_capacity(p * (n + 1));
        for i in 0..p {
            let row = &visible[i * n..(i + 1) * n];
            allow.extend_from_slice(row);
            allow.push(null.is_none() || !row.iter().any(|&v| v));
        }
        let mask = Mask::new(p, 1, n + 1, allow)?;
        integrate.cross_forward(query, ctx, Some(&mask))
    }

    pub fn output(&self, pass: Pass) -> &OutputMlp {
        match pass {
            Pass::Coarse => &self.coarse,
            Pass::Fine => &self.fine,
        }
    }

    /// Full evaluation for one pass.
    pub fn evaluate<'t, T: Real>(&self, pts: &Points<'t, T>, cond: &SceneCond<'t, T>, pass: Pass) -> Result<Radiance<'t, T>> {
        let f = self.features(pts, cond)?;
        let out = self.output(pass).forward(pts, f);
        if !out.sigma.value().all_finite() || !out.rgb.value().all_finite() {
            return Err(Error::numeric(format!("non-finite scene function output for {} points", pts.len())));
        }
        Ok(out)
    }

    /// Background colours `[R, 3]` for unit directions `d: [R, 3]`.
    pub fn background<'t, T: Real>(&self, d: Var<'t, T>, cond: &SceneCond<'t, T>) -> Result<Var<'t, T>> {
        self.background.forward(encode(d, self.cfg.dir_enc), cond)
    }
}
