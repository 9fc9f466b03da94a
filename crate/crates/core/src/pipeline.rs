//! Declarative experiments: segment, featurize, split, train, evaluate and
//! report, with every stage output written to an experiment directory.
//!
//! Featurized datasets are cached under `<out_dir>/cache/` keyed by a
//! SHA-256 over the manifest, every referenced recording and the stage
//! settings, so changing only training settings skips featurization.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::FeatureArchive;
use crate::bilstm::TrainConfig;
use crate::checkpoint;
use crate::error::Error;
use crate::evaluation::{self, EvalConfig, EvalReport, ReportContext};
use crate::features::{FeatureKind, Orientation};
use crate::ingest::{self, LabelKind, LabelTask, Manifest, PipelineConfig, NON_EEG_CHANNELS};
use crate::segmentation;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable holding the worker thread count for featurization
/// and parallel evaluation runs.
pub const THREADS_ENV: &str = "EEGCLASS_THREADS";

/// Classification task; `taste` is like vs dislike, `taste3` adds "like a
/// bit".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    AudioType,
    Genre,
    Taste,
    Taste3,
    Language,
    Known,
}

impl Task {
    pub fn label_task(self) -> LabelTask {
        let fixed = |kind, classes: &[&str]| LabelTask {
            kind,
            classes: Some(classes.iter().map(|s| s.to_string()).collect()),
        };
        match self {
            Task::AudioType => LabelTask::all(LabelKind::AudioType),
            Task::Genre => LabelTask::all(LabelKind::Genre),
            Task::Taste => fixed(LabelKind::Taste, &["L", "NL"]),
            Task::Taste3 => fixed(LabelKind::Taste, &["L", "B", "NL"]),
            Task::Language => LabelTask::all(LabelKind::Language),
            Task::Known => LabelTask::all(LabelKind::Known),
        }
    }
}

fn default_exclude() -> Vec<String> {
    NON_EEG_CHANNELS.iter().map(|s| s.to_string()).collect()
}

fn default_hidden() -> usize {
    20
}

fn default_runs() -> usize {
    10
}

fn default_train_frac() -> f64 {
    0.5
}

/// One experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Manifest path, relative to the config file.
    pub manifest: PathBuf,
    /// Experiment directory, relative to the config file.
    pub out_dir: PathBuf,
    pub trial_ms: f64,
    pub overlap: f64,
    pub feature_kind: FeatureKind,
    pub label_kind: Task,
    /// Overrides the class list (and order) implied by `label_kind`. The
    /// first class is the positive class of binary reports.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default = "default_exclude")]
    pub exclude_channels: Vec<String>,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub train: TrainConfig,
    #[serde(default = "default_runs")]
    pub eval_runs: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::config("<file>", e.to_string()))
    }

    /// Checks every field without touching any data.
    pub fn validate(&self) -> Result<(), Error> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!(
                    "unsupported version {}, expected {CONFIG_VERSION}",
                    self.version
                ),
            ));
        }
        segmentation::check_params(self.trial_ms / 1000.0, self.overlap)?;
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if self.eval_runs == 0 {
            return Err(Error::config("eval_runs", "must be positive"));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config(
                "train_frac",
                "must lie strictly between 0 and 1",
            ));
        }
        self.train
            .validate()
            .map_err(|e| Error::config("train", e.to_string()))?;
        let task = self.label_task();
        if let Some(classes) = &task.classes {
            if classes.len() < 2 {
                return Err(Error::config("classes", "need at least 2 classes"));
            }
            for c in classes {
                task.kind
                    .check_value(c)
                    .map_err(|e| Error::config("classes", e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn label_task(&self) -> LabelTask {
        let mut task = self.label_kind.label_task();
        if let Some(c) = &self.classes {
            task.classes = Some(c.clone());
        }
        task
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            trial_len_s: self.trial_ms / 1000.0,
            overlap_frac: self.overlap,
            feature_kind: self.feature_kind,
            orientation: self.orientation,
            exclude: self.exclude_channels.clone(),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            runs: self.eval_runs,
            train_frac: self.train_frac,
            seed: self.train.seed,
            hidden: self.hidden,
            train: self.train.clone(),
        }
    }
}

/// Exclusive claim on an experiment directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(source) => Err(Error::Io { path, source }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Content key of the featurization stage.
pub fn feature_cache_key(
    manifest_path: &Path,
    manifest: &Manifest,
    task: &LabelTask,
    cfg: &PipelineConfig,
) -> Result<String, Error> {
    let mut h = Sha256::new();
    h.update(b"features/v1\0");
    h.update(read(manifest_path)?);
    for entry in &manifest.entries {
        let bytes = read(&manifest.resolve(entry))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    let stage = serde_json::to_vec(&(task, cfg)).expect("stage config serializes");
    h.update(&stage);
    Ok(hex(&h.finalize()[..16]))
}

/// Builds the feature archive, or loads it from the cache when the inputs
/// and stage settings are unchanged. Returns the archive and its path.
pub fn featurize_cached(
    manifest_path: &Path,
    task: &LabelTask,
    cfg: &PipelineConfig,
    cache_dir: &Path,
) -> Result<(FeatureArchive, PathBuf), Error> {
    let manifest = Manifest::load(manifest_path)?;
    let key = feature_cache_key(manifest_path, &manifest, task, cfg)?;
    let path = cache_dir.join(format!("features-{key}.eegf"));
    if path.exists() {
        return Ok((FeatureArchive::load(&path)?, path));
    }
    let dataset = ingest::build_dataset(&manifest, task, cfg)?;
    let archive = FeatureArchive {
        kind: cfg.feature_kind,
        dataset,
    };
    fs::create_dir_all(cache_dir).map_err(|source| Error::Io {
        path: cache_dir.to_path_buf(),
        source,
    })?;
    archive.save(&path)?;
    Ok((archive, path))
}

/// Files produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub features: PathBuf,
    pub report_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

pub fn load_report(path: &Path) -> Result<EvalReport, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::config("report", e.to_string()))
}

/// Runs the whole pipeline. Relative paths in `cfg` resolve against
/// `base_dir` (normally the config file's directory).
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<ExperimentOutput, Error> {
    cfg.validate()?;
    let manifest_path = base_dir.join(&cfg.manifest);
    if !manifest_path.is_file() {
        return Err(Error::config(
            "manifest",
            format!("{} does not exist", manifest_path.display()),
        ));
    }
    let out_dir = base_dir.join(&cfg.out_dir);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    let _lock = DirLock::acquire(&out_dir)?;

    let task = cfg.label_task();
    let (archive, features) = featurize_cached(
        &manifest_path,
        &task,
        &cfg.pipeline(),
        &out_dir.join("cache"),
    )?;

    let (mut report, models) = evaluation::repeated_eval(&archive.dataset, &cfg.eval())?;
    report.context = Some(ReportContext {
        feature_kind: cfg.feature_kind.as_str().to_string(),
        trial_ms: cfg.trial_ms,
        label_kind: serde_json::to_value(cfg.label_kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
    });

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io(&ckpt_dir))?;
    let mut checkpoints = Vec::with_capacity(models.len());
    for (i, model) in models.iter().enumerate() {
        let path = ckpt_dir.join(format!("run-{i:02}.eegm"));
        checkpoint::save(&path, model)?;
        checkpoints.push(path);
    }

    let report_path = out_dir.join("report.json");
    fs::write(&report_path, report_json(&report)).map_err(io(&report_path))?;
    Ok(ExperimentOutput {
        report,
        features,
        report_path,
        checkpoints,
    })
}

/// Sizes the global rayon pool from [`THREADS_ENV`] when set.
pub fn init_thread_pool() -> Result<(), Error> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(THREADS_ENV, format!("{v:?} is not a thread count")))?;
        // Already-initialized pools are left alone.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}
