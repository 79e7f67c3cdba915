//! Run configuration: TOML with a `[model]` and a `[train]` section.
//!
//! A file may name a `preset`; its own keys are then merged over the preset,
//! table by table, so a config only needs to state what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_scenes: usize,
    /// Rays per scene for the rendered-colour likelihood.
    pub image_rays: usize,
    /// Rays per scene for the depth-guided likelihood.
    pub depth_rays: usize,
    pub n_context: usize,
    pub n_target: usize,
    /// Views conditioning the posterior: the context plus the first targets.
    pub n_posterior: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub steps: u64,
    /// Fraction of `steps` over which the KL weight rises linearly from 0 to 1.
    pub kl_anneal_frac: f64,
    pub likelihood_std: f64,
    pub depth_loss: bool,
    pub density_l1: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_scenes", self.batch_scenes),
            ("n_context", self.n_context),
            ("n_target", self.n_target),
            ("n_coarse", self.n_coarse),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
        }
        if self.image_rays == 0 && (self.depth_rays == 0 || !self.depth_loss) {
            return Err(Error::config("train.image_rays must be positive unless the depth loss supplies rays"));
        }
        if self.n_posterior < self.n_context || self.n_posterior > self.n_context + self.n_target {
            return Err(Error::config("train.n_posterior must lie between n_context and n_context + n_target"));
        }
        for (name, v) in [("lr", self.lr), ("likelihood_std", self.likelihood_std), ("grad_clip", self.grad_clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.kl_anneal_frac) {
            return Err(Error::config("train.kl_anneal_frac must lie in [0, 1]"));
        }
        if !(self.density_l1 >= 0.0) {
            return Err(Error::config("train.density_l1 must be non-negative"));
        }
        Ok(())
    }

    /// KL weight at `step`: 0 at the start, rising linearly to 1.
    pub fn beta(&self, step: u64) -> f64 {
        let ramp = self.kl_anneal_frac * self.steps as f64;
        if ramp <= 0.0 {
            1.0
        } else {
            (step as f64 / ramp).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Built-in presets by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("city-analog", include_str!("../presets/city-analog.toml")),
    ("shapenet-analog", include_str!("../presets/shapenet-analog.toml")),
    ("micro", include_str!("../presets/micro.toml")),
    ("smoke", include_str!("../presets/smoke.toml")),
];

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::config(format!("{origin}: {e}")))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(&format!("preset = \"{name}\""))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table = parse_table(text, "config")?;
        let merged = match table.remove("preset") {
            Some(toml::Value::String(name)) => {
                let (_, preset) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
                    let known: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                    Error::config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
                })?;
                let mut base = parse_table(preset, &format!("preset {name}"))?;
                merge(&mut base, table);
                base
            }
            Some(_) => return Err(Error::config("`preset` must be a string")),
            None => table,
        };
        let cfg: Config = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
