//! Experiment configuration: a TOML file of flat `key = value` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::weighting::{TargetMode, WeightingMode, DEFAULT_BOTTLENECK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Bn,
    BnWel,
    Dn,
    DnMnih,
    DnSym,
    Wdn,
    Iwdn,
    Biwdn,
}

impl ModelKind {
    pub fn weighting(self) -> Option<WeightingMode> {
        match self {
            Self::Wdn => Some(WeightingMode::Wdn),
            Self::Iwdn => Some(WeightingMode::Iwdn),
            Self::Biwdn => Some(WeightingMode::Biwdn),
            _ => None,
        }
    }

    pub fn is_phase2(self) -> bool {
        self.weighting().is_some()
    }

    /// Single-head kinds.
    pub fn is_bn(self) -> bool {
        matches!(self, Self::Bn | Self::BnWel)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bn => "bn",
            Self::BnWel => "bn-wel",
            Self::Dn => "dn",
            Self::DnMnih => "dn-mnih",
            Self::DnSym => "dn-sym",
            Self::Wdn => "wdn",
            Self::Iwdn => "iwdn",
            Self::Biwdn => "biwdn",
        }
    }
}

fn default_lump() -> usize {
    1000
}
fn default_bottleneck() -> usize {
    DEFAULT_BOTTLENECK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Annotators with fewer labeled examples share one composite head.
    #[serde(default = "default_lump")]
    pub lump_threshold: usize,
    #[serde(default)]
    pub target_mode: TargetMode,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub batch_size: usize,
    /// Upper bound on optimizer steps.
    pub steps: u64,
    /// Head learning rate as a fraction of the backbone rate.
    pub head_lr_ratio: f64,
    /// Validation cadence in steps.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping; 0 never stops early.
    pub patience: u64,
    pub eval_batch: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 64, steps: 2000, head_lr_ratio: 0.1, eval_every: 200, patience: 0, eval_batch: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationSection {
    /// Drop probability inside the backbone.
    pub dropout: f64,
    pub l1: f64,
    pub l2: f64,
    /// Confidence-penalty weight β.
    pub entropy_weight: f64,
    /// Parameter EMA decay; 0 disables averaging.
    pub ema_decay: f64,
    /// Weight losses by `1/(K·q(c))` of the training targets.
    pub class_balance: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// 80/10/10 train/validation/test by hashing the example id.
    #[default]
    Hash,
    /// Test set from separate files; validation carved from the training file
    /// by hashing.
    Holdout,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    /// IDX (`.idx`, `-ubyte`) or text matrix of features.
    pub features: PathBuf,
    /// JSONL annotations (`example_id`, `annotator_id`, `grade`, `count`).
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Single-annotator labels (IDX or `example_id grade` text); alternative
    /// to `annotations`.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Ground-truth grades for evaluation.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default)]
    pub test_features: Option<PathBuf>,
    #[serde(default)]
    pub test_truth: Option<PathBuf>,
    /// Validation share of the training file in holdout mode.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Section {
    /// Output directory of the doctor-net run whose replicate checkpoints are
    /// frozen.
    pub dn_run: Option<PathBuf>,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    /// Store the frozen predictions of the training split in the checkpoint.
    pub cache_in_checkpoint: bool,
}

impl Default for Phase2Section {
    fn default() -> Self {
        Self { dn_run: None, lr: 1e-2, steps: 1000, batch_size: 64, eval_every: 100, cache_in_checkpoint: false }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorCorrection {
    #[default]
    None,
    /// Class distribution of the test truth.
    Known,
    /// `eval_prior` from the config.
    Explicit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub prior_correction: PriorCorrection,
    pub eval_prior: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    Kclass,
    Auc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    pub replicates: usize,
    /// Excluded from the config hash.
    pub output_dir: Option<PathBuf>,
    /// 1-based first class of the positive group for binary metrics.
    pub threshold_class: usize,
    pub target_sens: f64,
    /// Validation metric for model selection.
    pub select_on: Selection,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 1,
            output_dir: None,
            threshold_class: crate::metrics::DEFAULT_THRESHOLD_CLASS,
            target_sens: crate::metrics::DEFAULT_TARGET_SENS,
            select_on: Selection::Kclass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub regularization: RegularizationSection,
    pub data: DataSection,
    #[serde(default)]
    pub phase2: Phase2Section,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let d = &mut self.data;
        fix(&mut d.features);
        [&mut d.annotations, &mut d.labels, &mut d.truth, &mut d.test_features, &mut d.test_truth]
            .into_iter()
            .flatten()
            .for_each(fix);
        if let Some(p) = self.phase2.dn_run.as_mut() {
            fix(p);
        }
        if let Some(p) = self.experiment.output_dir.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.backbone.validate()?;
        if self.data.classes < 2 {
            return bad("data.classes must be at least 2".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.batch_size == 0 || o.steps == 0 || o.eval_every == 0 || o.eval_batch == 0 {
            return bad("optim needs lr > 0 and positive batch_size, steps, eval_every, eval_batch".into());
        }
        if !(o.head_lr_ratio > 0.0) {
            return bad("optim.head_lr_ratio must be positive".into());
        }
        let r = &self.regularization;
        if !(0.0..1.0).contains(&r.dropout) {
            return bad(format!("regularization.dropout {} outside [0, 1)", r.dropout));
        }
        if !(0.0..1.0).contains(&r.ema_decay) {
            return bad(format!("regularization.ema_decay {} outside [0, 1)", r.ema_decay));
        }
        if r.l1 < 0.0 || r.l2 < 0.0 || r.entropy_weight < 0.0 {
            return bad("regularization weights must be non-negative".into());
        }
        if self.experiment.replicates == 0 {
            return bad("experiment.replicates must be at least 1".into());
        }
        if self.data.annotations.is_some() == self.data.labels.is_some() {
            return bad("data needs exactly one of annotations or labels".into());
        }
        if self.data.split == SplitMode::Holdout && self.data.test_features.is_none() {
            return bad("holdout split needs data.test_features".into());
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return bad("data.val_fraction outside [0, 1)".into());
        }
        let p = &self.phase2;
        if self.model.kind.is_phase2() {
            if !(p.lr > 0.0) || p.steps == 0 || p.batch_size == 0 || p.eval_every == 0 {
                return bad("phase2 needs lr > 0 and positive steps, batch_size, eval_every".into());
            }
            if self.model.bottleneck == 0 {
                return bad("model.bottleneck must be positive".into());
            }
        }
        if self.calibration.prior_correction == PriorCorrection::Explicit
            && self.calibration.eval_prior.len() != self.data.classes
        {
            return bad("calibration.eval_prior needs one entry per class".into());
        }
        let t = self.experiment.threshold_class;
        if t < 2 || t > self.data.classes {
            return bad(format!("experiment.threshold_class {t} outside 2..={}", self.data.classes));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with output paths cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
