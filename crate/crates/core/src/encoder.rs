//! Residual convolutional image encoder.
//!
//! Each context view enters as an NHWC map with 9 channels: RGB, the
//! per-pixel unit ray direction, and the camera origin broadcast to every
//! pixel. Level `l` (1-based) has resolution `W / 2^l` and `base * 2^l`
//! channels.

use lasernv_tensor::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::geometry::Camera;
use crate::nn::{Builder, Conv2d, GroupNorm, Init};
use crate::{Error, Result};

/// Input channels per pixel.
pub const INPUT_CHANNELS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub levels: usize,
    pub blocks_per_level: usize,
    pub base_channels: usize,
    pub groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { levels: 4, blocks_per_level: 2, base_channels: 16, groups: 8 }
    }
}

impl EncoderConfig {
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of the stacked feature map, `sum_l base * 2^l`.
    pub fn stack_channels(&self) -> usize {
        (1..=self.levels).map(|l| self.level_channels(l)).sum()
    }

    /// Dimension of the context tokens (last level).
    pub fn token_dim(&self) -> usize {
        self.level_channels(self.levels)
    }

    pub fn check_size(&self, width: usize, height: usize) -> Result<()> {
        let f = 1usize << self.levels;
        if width % f != 0 || height % f != 0 || width == 0 || height == 0 {
            return Err(Error::domain(format!(
                "image size {width}x{height} is not divisible by 2^{} = {f}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// `conv3x3 - groupnorm - swish - conv3x3`, added to the input.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm: GroupNorm,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new(b: &mut Builder<'_>, channels: usize, groups: usize) -> Self {
        Self {
            conv1: Conv2d::new(b, "conv1", channels, channels, 3, 1, Init::Fan(1.0)),
            norm: GroupNorm::new(b, "norm", channels, groups),
            conv2: Conv2d::new(b, "conv2", channels, channels, 3, 1, Init::Fan(0.5)),
        }
    }

    fn forward<'t, T: Real>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.conv2.forward(self.norm.forward(self.conv1.forward(x)).silu());
        x.add(h)
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub blocks: Vec<ResBlock>,
    pub down: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stem: Conv2d,
    pub levels: Vec<Level>,
}

/// Per-level feature maps of a batch of views, `[N, H / 2^l, W / 2^l, C_l]`.
pub struct FeaturePyramid<'t, T: Real> {
    pub levels: Vec<Var<'t, T>>,
}

impl Encoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: EncoderConfig) -> Self {
        let mut s = b.sub(name);
        let stem = Conv2d::new(&mut s, "stem", INPUT_CHANNELS, cfg.base_channels, 3, 1, Init::Fan(1.0));
        let levels = (1..=cfg.levels)
            .map(|l| {
                let c = cfg.level_channels(l - 1);
                let mut ls = s.sub(&format!("level{l}"));
                let blocks = (0..cfg.blocks_per_level)
                    .map(|i| ResBlock::new(&mut ls.sub(&format!("block{i}")), c, cfg.groups))
                    .collect();
                let down = Conv2d::new(&mut ls, "down", c, 2 * c, 3, 2, Init::Fan(1.0));
                Level { blocks, down }
            })
            .collect();
        Self { cfg, stem, levels }
    }

    /// Encodes a batch of views `[N, H, W, 9]`.
    pub fn encode<'t, T: Real>(&self, input: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[3] != INPUT_CHANNELS {
            return Err(Error::domain(format!("encoder input must be [N, H, W, 9], got {shape:?}")));
        }
        self.cfg.check_size(shape[2], shape[1])?;
        let mut x = self.stem.forward(input);
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for block in &level.blocks {
                x = block.forward(x);
            }
            x = level.down.forward(x);
            out.push(x);
        }
        Ok(FeaturePyramid { levels: out })
    }
}

/// Builds the 9-channel encoder input of one view, `[H, W, 9]`.
///
/// `image` is row-major RGB in `[0, 1]`.
pub fn view_input<T: Real>(image: &[f32], camera: &Camera) -> Tensor<T> {
    let (w, h) = (camera.width, camera.height);
    assert_eq!(image.len(), w * h * 3, "image does not match camera size");
    let origin = camera.center();
    let mut data = Vec::with_capacity(w * h * INPUT_CHANNELS);
    for row in 0..h {
        for col in 0..w {
            let p = (row * w + col) * 3;
            let d = camera.pixel_center_ray(col, row).direction;
            data.extend(image[p..p + 3].iter().map(|&v| T::of(v as f64)));
            data.extend([d.x, d.y, d.z].map(T::of));
            data.extend([origin.x, origin.y, origin.z].map(T::of));
        }
    }
    Tensor::new(vec![h, w, INPUT_CHANNELS], data)
}

impl<'t, T: Real> FeaturePyramid<'t, T> {
    /// All levels bilinearly resized to level 1 and concatenated along channels.
    pub fn feature_stack(&self) -> Var<'t, T> {
        let first = self.levels[0];
        let (h, w) = (first.dim(1), first.dim(2));
        let parts: Vec<_> = self
            .levels
            .iter()
            .map(|&l| if l.dim(1) == h && l.dim(2) == w { l } else { l.resize_bilinear(h, w) })
            .collect();
        first.tape().concat(&parts, 3)
    }

    /// `feature_stack() @ w` computed level by level, which avoids
    /// materializing the full-width stack. Exact because resizing is linear.
    pub fn project_stack(&self, w: Var<'t, T>) -> Var<'t, T> {
        let first = self.levels[0];
        let (h, wd) = (first.dim(1), first.dim(2));
        let mut offset = 0;
        let mut acc: Option<Var<'t, T>> = None;
        for &level in &self.levels {
            let c = level.dim(3);
            let proj = level.matmul(w.narrow(0, offset, c));
            offset += c;
            let proj = if level.dim(1) == h && level.dim(2) == wd { proj } else { proj.resize_bilinear(h, wd) };
            acc = Some(match acc {
                Some(a) => a.add(proj),
                None => proj,
            });
        }
        assert_eq!(offset, w.dim(0), "projection rows do not match stack channels");
        acc.expect("pyramid has at least one level")
    }

    /// The first `n` views.
    pub fn first_views(&self, n: usize) -> Self {
        let levels = self.levels.iter().map(|l| if l.dim(0) == n { *l } else { l.narrow(0, 0, n) }).collect();
        Self { levels }
    }

    pub fn num_views(&self) -> usize {
        self.levels[0].dim(0)
    }

    /// Last-level features of every view flattened into one token set `[N * h * w, C_L]`.
    pub fn context_tokens(&self) -> Var<'t, T> {
        let last = *self.levels.last().expect("pyramid has at least one level");
        let s = last.shape();
        last.reshape(vec![s[0] * s[1] * s[2], s[3]])
    }

    /// Tokens of a subset of views, given by index.
    pub fn context_tokens_of(&self, views: &[usize]) -> Var<'t, T> {
        let last = *self.levels.last().expect("pyramid has at least one level");
        let s = last.shape();
        let per = s[1] * s[2];
        let idx: Vec<usize> = views.iter().flat_map(|&v| v * per..(v + 1) * per).collect();
        self.context_tokens().index_select(std::rc::Rc::new(idx))
    }
}
