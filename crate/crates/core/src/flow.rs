//! Permutation-invariant conditional normalizing flow over latent sets.
//!
//! A latent set of `K` elements of dimension `D` is a `[K, D]` tensor whose
//! row order carries no meaning. Every layer is permutation-equivariant in
//! the rows and invariant in the order of the conditioning context, so the
//! resulting density is a function of the set alone.

use lasernv_tensor::{ParamId, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::Attention;
use crate::nn::{Builder, Init, Linear};
use crate::{Error, Result};

/// Log-scales are squashed into `[-SCALE_CLAMP, SCALE_CLAMP]` before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Sampling applies the layers as written; density inverts them.
    Forward,
    /// Sampling inverts the layers; density applies them as written.
    Inverted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Element dimension `D` (even).
    pub dim: usize,
    /// Width of the conditioner transformers.
    pub model_dim: usize,
    pub heads: usize,
    /// Number of (coupling, LPE) pairs.
    pub layers: usize,
    /// Dimension of the conditioning context vectors.
    pub ctx_dim: usize,
    pub direction: Direction,
}

/// `t_m`: self-attention over one half of the set, then cross-attention into the context.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub input: Linear,
    pub self_attn: Attention,
    pub cross_attn: Attention,
}

impl Conditioner {
    fn new(b: &mut Builder<'_>, cfg: &FlowConfig) -> Self {
        let half = cfg.dim / 2;
        Self {
            input: Linear::dense(b, "input", half, cfg.model_dim),
            self_attn: Attention::self_attn(b, "self_attn", cfg.model_dim, cfg.heads, 1),
            cross_attn: Attention::cross_attn(b, "cross_attn", cfg.model_dim, cfg.ctx_dim, cfg.heads, 1),
        }
    }

    /// `[K, D/2]`, context `[Nc, ctx_dim]` -> `[K, model_dim]`.
    fn forward<'t, T: Real>(&self, half: Var<'t, T>, ctx: Var<'t, T>) -> Result<Var<'t, T>> {
        let k = half.dim(0);
        let h = self.input.forward(half);
        let dm = h.dim(1);
        let h = self.self_attn.self_forward(h.reshape(vec![1, k, dm]))?;
        let ctx = ctx.reshape(vec![1, ctx.dim(0), ctx.dim(1)]);
        Ok(self.cross_attn.cross_forward(h, ctx, None)?.reshape(vec![k, dm]))
    }
}

/// Affine split-coupling layer with a shared conditioner and one
/// scale/shift head per half.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub cond: Conditioner,
    pub scale1: Linear,
    pub shift1: Linear,
    pub scale2: Linear,
    pub shift2: Linear,
}

/// Linear permutation-equivariant layer `z'_k = z_k A + mean(z) B`.
#[derive(Clone, Debug)]
pub struct LpeLayer {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct SetFlow {
    pub cfg: FlowConfig,
    pub layers: Vec<(CouplingLayer, LpeLayer)>,
}

fn scale_of<'t, T: Real>(head: &Linear, psi: Var<'t, T>) -> Var<'t, T> {
    head.forward(psi).scale(1.0 / SCALE_CLAMP).tanh().scale(SCALE_CLAMP)
}

fn check_finite<T: Real>(v: Var<'_, T>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} in flow layer")))
    }
}

impl CouplingLayer {
    pub fn new(b: &mut Builder<'_>, cfg: &FlowConfig) -> Self {
        assert!(cfg.dim % 2 == 0 && cfg.dim > 0, "flow element dimension must be even, got {}", cfg.dim);
        let half = cfg.dim / 2;
        let head = |b: &mut Builder<'_>, name: &str| Linear::new(b, name, cfg.model_dim, half, Init::Zero, false);
        Self {
            cond: Conditioner::new(b, cfg),
            scale1: head(b, "w_scale1"),
            shift1: head(b, "w_bias1"),
            scale2: head(b, "w_scale2"),
            shift2: head(b, "w_bias2"),
        }
    }

    /// `(Z', log|det J|)`.
    pub fn forward<'t, T: Real>(&self, z: Var<'t, T>, ctx: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let half = z.dim(1) / 2;
        let (z1, z2) = (z.narrow(1, 0, half), z.narrow(1, half, half));
        let psi2 = self.cond.forward(z2, ctx)?;
        let s1 = scale_of(&self.scale1, psi2);
        check_finite(s1, "log-scale")?;
        let z1n = z1.mul(s1.exp()).add(self.shift1.forward(psi2));
        let psi1 = self.cond.forward(z1n, ctx)?;
        let s2 = scale_of(&self.scale2, psi1);
        check_finite(s2, "log-scale")?;
        let z2n = z2.mul(s2.exp()).add(self.shift2.forward(psi1));
        let out = z.tape().concat(&[z1n, z2n], 1);
        Ok((out, s1.sum().add(s2.sum())))
    }

    /// Exact inverse of [`CouplingLayer::forward`], with the log-determinant of the inverse map.
    pub fn inverse<'t, T: Real>(&self, z: Var<'t, T>, ctx: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let half = z.dim(1) / 2;
        let (z1n, z2n) = (z.narrow(1, 0, half), z.narrow(1, half, half));
        let psi1 = self.cond.forward(z1n, ctx)?;
        let s2 = scale_of(&self.scale2, psi1);
        check_finite(s2, "log-scale")?;
        let z2 = z2n.sub(self.shift2.forward(psi1)).mul(s2.neg().exp());
        let psi2 = self.cond.forward(z2, ctx)?;
        let s1 = scale_of(&self.scale1, psi2);
        check_finite(s1, "log-scale")?;
        let z1 = z1n.sub(self.shift1.forward(psi2)).mul(s1.neg().exp());
        let out = z.tape().concat(&[z1, z2], 1);
        Ok((out, s1.sum().add(s2.sum()).neg()))
    }
}

impl LpeLayer {
    pub fn new(b: &mut Builder<'_>, dim: usize) -> Self {
        let eye = Tensor::from_fn(vec![dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        Self { a: b.tensor("a", eye), b: b.zeros("b", &[dim, dim]) }
    }

    fn log_dets<'t, T: Real>(&self, tape: &'t Tape<'t, T>, k: usize) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let a = tape.param(self.a);
        let ab = a.add(tape.param(self.b));
        let lda = a.log_abs_det().ok_or_else(|| Error::Singular("LPE matrix A".into()))?;
        let ldab = ab.log_abs_det().ok_or_else(|| Error::Singular("LPE matrix A + B".into()))?;
        Ok((lda.scale((k - 1) as f64).add(ldab), a, ab))
    }

    pub fn forward<'t, T: Real>(&self, z: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = z.tape();
        let k = z.dim(0);
        let (logdet, a, _) = self.log_dets(tape, k)?;
        let mean = z.mean_axis(0, true);
        let out = z.matmul(a).add(mean.matmul(tape.param(self.b)));
        Ok((out, logdet))
    }

    pub fn inverse<'t, T: Real>(&self, z: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = z.tape();
        let k = z.dim(0);
        let (logdet, a, ab) = self.log_dets(tape, k)?;
        // mean(z') = mean(z) (A + B), then z = (z' - mean(z) B) A^-1.
        let mean = z.mean_axis(0, true).matmul(ab.inverse());
        let out = z.sub(mean.matmul(tape.param(self.b))).matmul(a.inverse());
        Ok((out, logdet.neg()))
    }
}

/// Log density of i.i.d. standard normal entries.
pub fn base_logprob<'t, T: Real>(z: Var<'t, T>) -> Var<'t, T> {
    let n = z.value().numel() as f64;
    z.square().sum().scale(-0.5).add_scalar(-0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Standard-normal `[k, dim]` noise.
pub fn base_sample<T: Real>(k: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(vec![k, dim], |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::of(v)
    })
}

impl SetFlow {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: FlowConfig) -> Self {
        let mut s = b.sub(name);
        let layers = (0..cfg.layers)
            .map(|m| {
                let mut l = s.sub(&format!("layer{m}"));
                let coupling = CouplingLayer::new(&mut l.sub("coupling"), &cfg);
                let lpe = LpeLayer::new(&mut l.sub("lpe"), cfg.dim);
                (coupling, lpe)
            })
            .collect();
        Self { cfg, layers }
    }

    /// Layers as written: `coupling_1, lpe_1, .., coupling_M, lpe_M`.
    pub fn apply<'t, T: Real>(&self, z: Var<'t, T>, ctx: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut z = z;
        let mut logdet = z.tape().scalar(0.0);
        for (coupling, lpe) in &self.layers {
            let (zc, l1) = coupling.forward(z, ctx)?;
            let (zl, l2) = lpe.forward(zc)?;
            z = zl;
            logdet = logdet.add(l1).add(l2);
        }
        Ok((z, logdet))
    }

    /// Inverse of [`SetFlow::apply`] with the inverse map's log-determinant.
    pub fn unapply<'t, T: Real>(&self, z: Var<'t, T>, ctx: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut z = z;
        let mut logdet = z.tape().scalar(0.0);
        for (coupling, lpe) in self.layers.iter().rev() {
            let (zl, l2) = lpe.inverse(z)?;
            let (zc, l1) = coupling.inverse(zl, ctx)?;
            z = zc;
            logdet = logdet.add(l1).add(l2);
        }
        Ok((z, logdet))
    }

    /// Pushes base noise `[K, D]` through the generative direction: `(Z, log p(Z))`.
    pub fn sample_from_noise<'t, T: Real>(&self, noise: Var<'t, T>, ctx: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let base = base_logprob(noise);
        let (z, logdet) = match self.cfg.direction {
            Direction::Forward => self.apply(noise, ctx)?,
            Direction::Inverted => self.unapply(noise, ctx)?,
        };
        Ok((z, base.sub(logdet)))
    }

    /// `(Z, log p(Z | ctx))` for `Z ~ p(. | ctx)` with `k` elements.
    pub fn sample<'t, T: Real>(&self, tape: &'t Tape<'t, T>, ctx: Var<'t, T>, k: usize, rng: &mut impl Rng) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if k == 0 {
            return Err(Error::domain("latent set size must be at least 1"));
        }
        let noise = tape.constant(base_sample(k, self.cfg.dim, rng));
        self.sample_from_noise(noise, ctx)
    }

    /// `log p(Z | ctx)`.
    pub fn logprob<'t, T: Real>(&self, z: Var<'t, T>, ctx: Var<'t, T>) -> Result<Var<'t, T>> {
        if !z.value().all_finite() {
            return Err(Error::numeric("non-finite latent set"));
        }
        let (z0, logdet) = match self.cfg.direction {
            Direction::Forward => self.unapply(z, ctx)?,
            Direction::Inverted => self.apply(z, ctx)?,
        };
        Ok(base_logprob(z0).add(logdet))
    }
}
