//! Parameter registration and the dense building blocks shared by every
//! network in the model.
//!
//! Modules only hold [`ParamId`]s, so the same module runs against an `f32`
//! training tree or its `f64` cast used for gradient checks.

use lasernv_tensor::{ParamId, ParamTree, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Registers parameters under a `/`-separated name prefix.
pub struct Builder<'a> {
    params: &'a mut ParamTree<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamTree<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { params, rng, prefix: String::new() }
    }

    /// Child builder that prefixes names with `name/`.
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}/{name}", self.prefix) };
        Builder { params: self.params, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<f32>) -> ParamId {
        let full = self.full_name(name);
        self.params.insert(full, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.tensor(name, Tensor::full(shape.to_vec(), value))
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(self.rng);
                (v * std) as f32
            })
            .collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

/// How the weights of a [`Linear`] start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Variance-preserving Gaussian, `std = gain / sqrt(fan_in)`.
    Fan(f64),
    Zero,
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, fan_in: usize, fan_out: usize, init: Init, bias: bool) -> Self {
        let mut s = b.sub(name);
        let w = match init {
            Init::Fan(gain) => s.normal("w", &[fan_in, fan_out], gain / (fan_in.max(1) as f64).sqrt()),
            Init::Zero => s.zeros("w", &[fan_in, fan_out]),
        };
        let bias = bias.then(|| s.zeros("b", &[fan_out]));
        Self { w, b: bias, fan_in, fan_out }
    }

    /// Default layer: fan-in Gaussian weights and zero bias.
    pub fn dense(b: &mut Builder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::new(b, name, fan_in, fan_out, Init::Fan(1.0), true)
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        let y = x.matmul(tape.param(self.w));
        match self.b {
            Some(b) => y.add(tape.param(b)),
            None => y,
        }
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self { gain: s.constant("gain", &[dim], 1.0), bias: s.zeros("bias", &[dim]) }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        x.layer_norm(NORM_EPS).mul(tape.param(self.gain)).add(tape.param(self.bias))
    }
}

/// Group normalization of NHWC maps with learned per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl GroupNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels);
        assert_eq!(channels % groups, 0, "{channels} channels not divisible into {groups} groups");
        let mut s = b.sub(name);
        Self { groups, gain: s.constant("gain", &[channels], 1.0), bias: s.zeros("bias", &[channels]) }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        x.group_norm(self.groups, NORM_EPS).mul(tape.param(self.gain)).add(tape.param(self.bias))
    }
}

/// Square-kernel NHWC convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let mut s = b.sub(name);
        let fan_in = kernel * kernel * cin;
        let w = match init {
            Init::Fan(gain) => s.normal("w", &[kernel, kernel, cin, cout], gain / (fan_in as f64).sqrt()),
            Init::Zero => s.zeros("w", &[kernel, kernel, cin, cout]),
        };
        Self { w, b: s.zeros("b", &[cout]), stride, pad: kernel / 2 }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        x.conv2d(tape.param(self.w), self.stride, self.pad).add(tape.param(self.b))
    }
}

/// Plain MLP with ReLU between layers and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, dims: &[usize]) -> Self {
        let mut s = b.sub(name);
        let layers = dims.windows(2).enumerate().map(|(i, d)| Linear::dense(&mut s, &format!("l{i}"), d[0], d[1])).collect();
        Self { layers }
    }

    pub fn forward<'t, T: Real>(&self, mut x: Var<'t, T>) -> Var<'t, T> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(x);
            if i < last {
                x = x.relu();
            }
        }
        x
    }
}

/// Circular encoding of the last axis (size 3) as tape ops, so positions
/// stay differentiable. `[.., 3] -> [.., 3 * 2 * n_freq]`, laid out per
/// component as `(sin f0, cos f0, sin f1, cos f1, ..)`.
pub fn encode<'t, T: Real>(x: Var<'t, T>, range: crate::geometry::EncodingRange) -> Var<'t, T> {
    let tape = x.tape();
    let shape = x.shape();
    let c = *shape.last().expect("encode needs a trailing axis");
    let freqs = range.frequencies();
    let f = freqs.len();
    let freq = tape.constant(Tensor::from_f64(vec![f, 1], &freqs));
    // [.., c, 1, 1] * [f, 1] -> [.., c, f, 1]
    let mut s3 = shape.clone();
    s3.push(1);
    s3.push(1);
    let a = x.reshape(s3).mul(freq);
    let both = tape.concat(&[a.sin(), a.cos()], shape.len() + 1);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = c * f * 2;
    both.reshape(out_shape)
}

/// Adds `N(0, std^2)` noise to every parameter.
///
/// Freshly built models start with zero-initialised heads, under which many
/// maps are trivially the identity; tests jitter them to exercise the general case.
pub fn jitter(params: &mut ParamTree<f32>, std: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.value_mut(id).data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += (n * std) as f32;
        }
    }
}
