//! The experiment file: one TOML document with `[dataset]`, `[model]`,
//! `[train]`, `[eval]` and `[ensemble]` sections. Relative paths resolve
//! against the directory holding the file.

use std::path::{Path, PathBuf};

use distillvol::data::AugmentParams;
use distillvol::orchestrator::{Duration, LrSchedule, ModelSpec, OptimizerSpec, TrainConfig};
use distillvol::regions::Extents;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub model: Option<ModelSpec>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub ensemble: Option<EnsembleSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manually labeled cases.
    pub root: Option<PathBuf>,
    /// Cases without labels, to be annotated by the ensemble.
    pub unlabeled: Option<PathBuf>,
    /// Pseudo-label store written by `ensemble-label`.
    pub pseudo_labels: Option<PathBuf>,
}

fn default_overlap() -> f64 {
    distillvol::nn::DEFAULT_OVERLAP
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub patch: Extents,
    pub batch_size: usize,
    pub iterations: Option<usize>,
    pub epochs: Option<usize>,
    pub optimizer: OptimizerSpec,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub resample: Option<Extents>,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// A separate directory of labeled evaluation cases.
    pub root: Option<PathBuf>,
    /// Explicit evaluation case ids taken out of `dataset.root`.
    pub cases: Option<Vec<String>>,
    /// Stratified share of `dataset.root` held out for evaluation.
    pub fraction: Option<f64>,
    /// Weights evaluated by `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Row label in the comparison table.
    pub method: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default)]
    pub hard_labels: bool,
    pub members: Vec<MemberSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSection {
    /// The member's own experiment file (model and patch settings).
    pub config: PathBuf,
    pub checkpoint: PathBuf,
}

/// A parsed experiment file plus what is needed to point at its lines.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: PathBuf,
    pub text: String,
    pub cfg: RunConfig,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.out,
            &mut cfg.dataset.root,
            &mut cfg.dataset.unlabeled,
            &mut cfg.dataset.pseudo_labels,
        ] {
            if let Some(p) = p.as_mut() {
                fix(p);
            }
        }
        if let Some(e) = cfg.eval.as_mut() {
            for p in [&mut e.root, &mut e.checkpoint].into_iter().flatten() {
                fix(p);
            }
        }
        if let Some(ens) = cfg.ensemble.as_mut() {
            for m in ens.members.iter_mut() {
                fix(&mut m.config);
                fix(&mut m.checkpoint);
            }
        }
        Ok(Loaded {
            path: path.to_path_buf(),
            text,
            cfg,
        })
    }

    /// 1-based line of `key` inside `[section]` (or at top level when
    /// `section` is empty).
    pub fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        let mut current = String::new();
        for (i, line) in self.text.lines().enumerate() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.split(']').next()) {
                current = name.trim_matches('[').trim().to_string();
                continue;
            }
            let k = t.split('=').next().unwrap_or("").trim();
            if current == section && k == key {
                return Some(i + 1);
            }
        }
        None
    }

    /// Diagnostic naming the dotted key and, when found, its line.
    pub fn error(&self, section: &str, key: &str, detail: impl std::fmt::Display) -> CliError {
        let dotted = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let at = match self.line_of(section, key) {
            Some(l) => format!("{}:{l}", self.path.display()),
            None => self.path.display().to_string(),
        };
        CliError::Config(format!("{at}: {dotted}: {detail}"))
    }

    /// `section.key` must be set and name an existing path.
    pub fn existing(&self, section: &str, key: &str, value: Option<&PathBuf>) -> Result<PathBuf, CliError> {
        match value {
            None => Err(self.error(section, key, "missing")),
            Some(p) if !p.exists() => Err(self.error(section, key, format!("path {} does not exist", p.display()))),
            Some(p) => Ok(p.clone()),
        }
    }

    pub fn model(&self) -> Result<ModelSpec, CliError> {
        self.cfg
            .model
            .clone()
            .ok_or_else(|| self.error("model", "arch", "the [model] section is missing"))
    }

    /// The `[model]` and `[train]` sections merged; all randomness flows from
    /// the root seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let mut model = self.model()?;
        let t = self
            .cfg
            .train
            .as_ref()
            .ok_or_else(|| self.error("train", "patch", "the [train] section is missing"))?;
        model.seed = seed;
        let duration = match (t.iterations, t.epochs) {
            (Some(n), None) => Duration::Iterations(n),
            (None, Some(e)) => Duration::Epochs(e),
            _ => return Err(self.error("train", "iterations", "set exactly one of iterations or epochs")),
        };
        let cfg = TrainConfig {
            model,
            patch: t.patch,
            batch_size: t.batch_size,
            duration,
            optimizer: t.optimizer,
            schedule: t.schedule,
            augment: t.augment.clone(),
            resample: t.resample,
            checkpoint_every: t.checkpoint_every,
            overlap: t.overlap,
            seed,
        };
        cfg.validate()
            .map_err(|e| CliError::Config(format!("{}: [train]/[model]: {e}", self.path.display())))?;
        Ok(cfg)
    }
}
