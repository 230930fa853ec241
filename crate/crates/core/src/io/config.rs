//! TOML run configuration shared by all commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{make_synthetic_corpus, Corpus, Generator};
use crate::calib::{ActCalib, PercentileMode, PercentileTable, WeightCalib};
use crate::distill::TrainConfig;
use crate::error::{Result, SilqError};
use crate::model::{ModelConfig, PlanPreset, PrecisionPlan};

/// One corpus: a blank-line separated text file or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    /// Documents produced by the generator.
    pub docs: usize,
    pub seed: u64,
    /// Share of training sequences drawn from this corpus.
    pub weight: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            path: None,
            generator: None,
            docs: 200,
            seed: 0,
            weight: 0.0,
        }
    }
}

impl CorpusSpec {
    pub fn synthetic(generator: Generator, seed: u64, docs: usize, weight: f64) -> Self {
        CorpusSpec {
            path: None,
            generator: Some(generator),
            docs,
            seed,
            weight,
        }
    }

    pub fn load(&self) -> Result<Corpus> {
        match (&self.path, self.generator) {
            (Some(path), None) => Corpus::from_file(path),
            (None, Some(g)) => Ok(make_synthetic_corpus(g, self.seed, self.docs)),
            _ => Err(SilqError::Config(
                "a corpus needs exactly one of `path` or `generator`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain: CorpusSpec,
    pub sft: CorpusSpec,
    pub heldout: CorpusSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain: CorpusSpec::synthetic(Generator::MarkovChain, 1, 400, 0.25),
            sft: CorpusSpec::synthetic(Generator::TemplateDialogue, 2, 400, 0.75),
            heldout: CorpusSpec::synthetic(Generator::TemplateDialogue, 3, 40, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    /// Plan preset such as `a8s-c8-w4`, `a8d-c4-w4`, `uniform8` or `fp`.
    pub plan: String,
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub act_method: ActCalib,
    pub weight_method: WeightCalib,
    pub percentile_mode: PercentileMode,
    /// `(bits, percentile)` pairs.
    pub percentiles: Vec<(u8, f64)>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            plan: "a8s-c8-w4".into(),
            batches: 5,
            batch_size: 128,
            seq_len: 64,
            act_method: ActCalib::Percentile,
            weight_method: WeightCalib::Mse,
            percentile_mode: PercentileMode::ClipRange,
            percentiles: vec![(4, 99.91), (8, 99.99), (16, 99.995)],
        }
    }
}

impl CalibConfig {
    pub fn precision_plan(&self) -> Result<PrecisionPlan> {
        let plan = self.plan.parse::<PlanPreset>()?.build()?;
        plan.validate_deployment()?;
        Ok(plan)
    }

    pub fn table(&self) -> Result<PercentileTable> {
        PercentileTable::new(self.percentiles.iter().copied().collect())
    }
}

/// Next-token training of the full-precision teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub min_lr_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            lr: 3e-3,
            batch_size: 16,
            seq_len: 64,
            weight_decay: 0.1,
            min_lr_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    /// Training settings for the teacher run; data mixture and seed come
    /// from `base`.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            base_lr: self.lr,
            base_steps: self.steps.max(1),
            steps: self.steps,
            auto_lr: false,
            kd_ratio: 0.0,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            weight_decay: self.weight_decay,
            min_lr_fraction: self.min_lr_fraction,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Length of the random parity prompts.
    pub prompt_len: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { prompt_len: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    /// Leave layer types rotatable from both sides out of the averages.
    pub exclude_both_side: bool,
    /// Restrict to proper rotations (det +1); otherwise allow reflections.
    pub special_orthogonal: bool,
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig {
            exclude_both_side: true,
            special_orthogonal: true,
        }
    }
}

/// Artifact locations. Relative paths are taken from the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Full-precision teacher checkpoint (written by `pretrain`).
    pub teacher: PathBuf,
    /// Calibrated student (written by `calibrate`, read by `train`).
    pub calibrated: PathBuf,
    /// Trained student (written by `train`).
    pub trained: PathBuf,
    pub metrics: PathBuf,
    pub export: PathBuf,
    pub report: PathBuf,
    /// Checkpoint evaluated by `eval`; defaults to `trained`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    /// Checkpoint exported by `export`; defaults to `trained`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export_source: Option<PathBuf>,
    /// Original weights for `analyze-rotation`; defaults to `teacher`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_before: Option<PathBuf>,
    /// Changed weights for `analyze-rotation`; defaults to `trained`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_after: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            teacher: "runs/teacher".into(),
            calibrated: "runs/calibrated".into(),
            trained: "runs/trained".into(),
            metrics: "runs/metrics.jsonl".into(),
            export: "runs/export".into(),
            report: "runs/rotation.tsv".into(),
            eval: None,
            export_source: None,
            rotation_before: None,
            rotation_after: None,
        }
    }
}

impl PathsConfig {
    fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.teacher,
            &mut self.calibrated,
            &mut self.trained,
            &mut self.metrics,
            &mut self.export,
            &mut self.report,
        ] {
            fix(p);
        }
        for p in [
            &mut self.eval,
            &mut self.export_source,
            &mut self.rotation_before,
            &mut self.rotation_after,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// Values derived during resolution, written to echoes for reference and
/// ignored when read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub peak_lr: f64,
    pub mixture_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub calibration: CalibConfig,
    pub train: TrainConfig,
    pub export: ExportConfig,
    pub rotation: RotationConfig,
    pub paths: PathsConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved: Option<Resolved>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            calibration: CalibConfig::default(),
            train: TrainConfig::default(),
            export: ExportConfig::default(),
            rotation: RotationConfig::default(),
            paths: PathsConfig::default(),
            resolved: None,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub auto_lr: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SilqError::Config(e.to_string()))
    }

    /// Parses `path` and resolves it against its directory and `overrides`.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SilqError::io(path, e))?;
        let config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() {
            Path::new(".")
        } else {
            base
        };
        let base = fs::canonicalize(base).map_err(|e| SilqError::io(base, e))?;
        config.resolve(&base, overrides)
    }

    /// Applies overrides, absolutizes paths, propagates the seed and the
    /// corpus weights, and validates the result.
    pub fn resolve(mut self, base: &Path, overrides: Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(steps) = overrides.steps {
            self.train.steps = steps;
        }
        if overrides.auto_lr {
            self.train.auto_lr = true;
        }
        self.paths.absolutize(base);
        for spec in [&mut self.data.pretrain, &mut self.data.sft, &mut self.data.heldout] {
            if let Some(p) = &mut spec.path {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        let (wp, ws) = (self.data.pretrain.weight, self.data.sft.weight);
        if wp < 0.0 || ws < 0.0 || ((wp + ws) - 1.0).abs() > 1e-9 {
            return Err(SilqError::Config(format!(
                "pretrain and sft corpus weights must be non-negative and sum to 1, got {wp} + {ws}"
            )));
        }
        self.train.mixture_ratio = wp;
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.train_config(&self.train).validate()?;
        self.calibration.precision_plan()?;
        self.calibration.table()?;
        if self.calibration.batches == 0 || self.calibration.batch_size == 0 {
            return Err(SilqError::Config("calibration needs at least one batch".into()));
        }
        self.resolved = Some(Resolved {
            peak_lr: self.train.peak_lr(),
            mixture_ratio: self.train.mixture_ratio,
        });
        Ok(self)
    }

    /// Fully resolved configuration as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
