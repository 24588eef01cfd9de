//! Training loops, sweeps and the end-to-end pipelines.

pub mod bracket;
pub mod induction;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use train::{train, Optimizer, OptimizerKind, TrainConfig, TrainOutcome, TracePoint};

use crate::model::{Example, ParamVector};
use crate::{util, Error, Precision, Result};

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "PATTERNING_WORKERS";

/// Worker count from `PATTERNING_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run `f` inside a rayon pool sized by [`worker_count`].
pub fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Train at the model's configured precision; params and metric callbacks
/// see `f64` values.
pub fn train_any(
    cfg: &TrainConfig,
    data: &[Example],
    mut metrics: impl FnMut(usize, &ParamVector<f64>) -> Result<Vec<(String, f64)>>,
) -> Result<TrainOutcome<f64>> {
    match cfg.model.numeric_precision {
        Precision::F32 => {
            let out = train::<f32>(cfg, data, |s, p| metrics(s, &p.cast()))?;
            Ok(TrainOutcome {
                params: out.params.cast(),
                trace: out.trace,
            })
        }
        Precision::F64 => train::<f64>(cfg, data, metrics),
    }
}

/// Record of a pipeline run: its configuration, progress and outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub pipeline: String,
    /// SHA-256 of the serialized pipeline config.
    pub config_sha256: String,
    pub completed_stages: Vec<String>,
    /// `(relative path, sha256)` of every emitted output.
    pub outputs: Vec<(String, String)>,
    /// Free-form notes such as replaced seeds.
    pub notes: Vec<String>,
}

/// Directory-backed pipeline state. The serialized config lives next to the
/// manifest so a run can be resumed or repeated from the directory alone.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: ExperimentManifest,
}

impl RunDir {
    pub const MANIFEST: &'static str = "manifest.toml";
    pub const CONFIG: &'static str = "config.toml";

    /// Open `root` for `pipeline` with the serialized `config_text`. An existing
    /// manifest is resumed only if it was produced by the same config.
    pub fn open(root: impl AsRef<Path>, pipeline: &str, config_text: &str) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let sha = util::sha256_hex(config_text.as_bytes());
        let mpath = root.join(Self::MANIFEST);
        let manifest = if mpath.exists() {
            let m: ExperimentManifest = util::read_toml(&mpath)?;
            if m.pipeline != pipeline || m.config_sha256 != sha {
                return Err(Error::InvalidArgument(format!(
                    "{} holds a different run; use a fresh output directory",
                    root.display()
                )));
            }
            m
        } else {
            ExperimentManifest {
                pipeline: pipeline.to_string(),
                config_sha256: sha,
                ..Default::default()
            }
        };
        util::write_file(root.join(Self::CONFIG), config_text)?;
        let dir = RunDir { root, manifest };
        dir.save()?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn done(&self, stage: &str) -> bool {
        self.manifest.completed_stages.iter().any(|s| s == stage)
    }

    pub fn complete(&mut self, stage: &str) -> Result<()> {
        if !self.done(stage) {
            self.manifest.completed_stages.push(stage.to_string());
        }
        self.save()
    }

    pub fn note(&mut self, note: String) -> Result<()> {
        if !self.manifest.notes.contains(&note) {
            log::info!("{note}");
            self.manifest.notes.push(note);
        }
        self.save()
    }

    /// Write an output file and record its hash.
    pub fn emit(&mut self, rel: &str, contents: &str) -> Result<()> {
        util::write_file(self.path(rel), contents)?;
        let sha = util::sha256_hex(contents.as_bytes());
        match self.manifest.outputs.iter_mut().find(|(p, _)| p == rel) {
            Some(entry) => entry.1 = sha,
            None => self.manifest.outputs.push((rel.to_string(), sha)),
        }
        self.save()
    }

    fn save(&self) -> Result<()> {
        util::write_toml(self.root.join(Self::MANIFEST), &self.manifest)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, sd)
}
