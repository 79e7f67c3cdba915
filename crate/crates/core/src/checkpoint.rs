//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"LNVCKPT\0"
//! u32     format version
//! u64     step
//! u32     config length, then the TOML config as UTF-8
//! u32     array count, then per array:
//!           u32 name length, UTF-8 name
//!           u32 rank, rank x u64 dims
//!           f32 data, row-major
//! ```
//!
//! Arrays are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.
//! The Adam time step equals the stored step.

use std::io::{Read, Write};
use std::path::Path;

use lasernv_tensor::{ParamTree, Tensor};

use crate::config::Config;
use crate::model::Model;
use crate::training::{Adam, Trainer};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LNVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: Config,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut arrays = Vec::with_capacity(3 * t.params.len());
        for (prefix, source) in [("param", None), ("adam_m", Some(&t.adam.m)), ("adam_v", Some(&t.adam.v))] {
            for id in t.params.ids() {
                let value = match source {
                    None => t.params.value(id).clone(),
                    Some(state) => state[id.index()].clone(),
                };
                arrays.push((format!("{prefix}/{}", t.params.name(id)), value));
            }
        }
        Self { step: t.step, config: t.cfg.clone(), arrays }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::data(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(origin, format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let step = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::data(origin, "config is not UTF-8"))?;
        let config = Config::from_toml_str(cfg_text).map_err(|e| Error::data(origin, format!("embedded config: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::data(origin, "array name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::data(origin, "array too large"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::data(origin, "array too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::data(origin, "trailing bytes after the last array"));
        }
        Ok(Self { step, config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never clobbers the previous checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies the `prefix/` arrays into tensors laid out like `params`.
    fn fill(&self, params: &ParamTree<f32>, prefix: &str) -> Result<Vec<Tensor<f32>>> {
        params
            .ids()
            .map(|id| {
                let name = format!("{prefix}/{}", params.name(id));
                let t = self.array(&name).ok_or_else(|| Error::config(format!("checkpoint lacks `{name}`")))?;
                if t.shape() != params.value(id).shape() {
                    return Err(Error::config(format!(
                        "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                        t.shape(),
                        params.value(id).shape()
                    )));
                }
                Ok(t.clone())
            })
            .collect()
    }

    /// Model and parameters, for rendering and evaluation.
    pub fn model(&self) -> Result<(Model, ParamTree<f32>)> {
        let mut t = Trainer::new(self.config.clone())?;
        for (id, v) in t.params.ids().collect::<Vec<_>>().into_iter().zip(self.fill(&t.params, "param")?) {
            t.params.set(id, v);
        }
        Ok((t.model, t.params))
    }

    /// A trainer that continues exactly where this checkpoint left off.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.config.clone())?;
        let values = self.fill(&t.params, "param")?;
        let m = self.fill(&t.params, "adam_m")?;
        let v = self.fill(&t.params, "adam_v")?;
        for (id, value) in t.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            t.params.set(id, value);
        }
        t.adam = Adam { m, v, t: self.step, ..Adam::new(&t.params, t.cfg.train.lr) };
        t.step = self.step;
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(self.origin, format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
