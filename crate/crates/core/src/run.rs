//! Training runs on disk: an output directory holding the config, the latest
//! checkpoint and a line-delimited JSON metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::SceneDataset;
use crate::training::{StepRecord, Trainer};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    /// Records of the metrics log, in order.
    pub fn read_metrics(&self) -> Result<Vec<StepRecord>> {
        read_metrics(&self.metrics())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Starts a run in `dir`, or with `resume` continues the checkpoint there.
///
/// A resumed run keeps the checkpoint's model and takes the `[train]` table
/// of `cfg`, so `steps` can be raised; the model tables must agree. Log lines
/// past the checkpoint are dropped, so the log continues without gaps or repeats.
pub fn train(cfg: Config, data: &SceneDataset, dir: &RunDir, resume: bool, mut progress: impl FnMut(&StepRecord)) -> Result<Trainer> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&dir.checkpoint())?;
        if ckpt.config.model != cfg.model {
            return Err(Error::config("the [model] table differs from the checkpoint being resumed"));
        }
        let mut t = ckpt.trainer()?;
        t.cfg.train = cfg.train.clone();
        t.adam.lr = cfg.train.lr;
        let kept: Vec<StepRecord> = match dir.read_metrics() {
            Ok(records) => records.into_iter().filter(|r| r.step < t.step).collect(),
            Err(Error::Io { .. }) => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).expect("records serialize"));
            text.push('\n');
        }
        fs::write(dir.metrics(), text).map_err(|e| Error::io(dir.metrics(), e))?;
        t
    } else {
        fs::write(dir.metrics(), "").map_err(|e| Error::io(dir.metrics(), e))?;
        Trainer::new(cfg)?
    };
    let cfg_path = dir.root.join(CONFIG_FILE);
    fs::write(&cfg_path, trainer.cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let metrics_path = dir.metrics();
    let mut log = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let every = trainer.cfg.train.checkpoint_every.max(1);
    trainer.run(data, |t, rec| {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        progress(rec);
        if t.step % every == 0 || t.step == t.cfg.train.steps {
            Checkpoint::from_trainer(t).save(&dir.checkpoint())?;
        }
        Ok(())
    })?;
    if trainer.step == 0 || !dir.checkpoint().exists() {
        Checkpoint::from_trainer(&trainer).save(&dir.checkpoint())?;
    }
    Ok(trainer)
}
