//! Experiment configuration: JSON schema, defaults and validation.
//!
//! Every section except `name`, `kind`, `datasets` and `output_dir` has
//! defaults. Unknown keys are rejected. A run writes the effective config back
//! out as `config.frozen.json`, which loads through the same path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CnnBlockSpec, ModelConfig, Precision};
use crate::sampling::{ContextEncoding, MaskPattern};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// One dataset; patterns and accelerations vary.
    FixedStudy,
    /// One pattern; datasets (studies) and accelerations vary.
    FixedMask,
    /// One dataset and pattern; models trained on `accelerations` are
    /// evaluated on the sweep grid.
    UnseenSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FixedStudy => "fixed_study",
            ExperimentKind::FixedMask => "fixed_mask",
            ExperimentKind::UnseenSweep => "unseen_sweep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RosterModel {
    /// Zero-filled input, no model.
    Zf,
    /// One STATIC model per context.
    Csm,
    /// One STATIC model trained on all contexts.
    Jcm,
    /// One context-conditioned model for all contexts.
    Mac,
}

impl RosterModel {
    pub fn name(self) -> &'static str {
        match self {
            RosterModel::Zf => "zf",
            RosterModel::Csm => "csm",
            RosterModel::Jcm => "jcm",
            RosterModel::Mac => "mac",
        }
    }

    pub fn is_trained(self) -> bool {
        self != RosterModel::Zf
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_cascades")]
    pub cascades: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub df_lambda: Option<f64>,
}

fn default_cascades() -> usize {
    5
}
fn default_channels() -> usize {
    32
}
fn default_kernel() -> usize {
    3
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            cascades: default_cascades(),
            channels: default_channels(),
            kernel: default_kernel(),
            precision: Precision::F64,
            df_lambda: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, mac: bool, context_len: usize) -> ModelConfig {
        let base = if mac {
            ModelConfig::mac(self.cascades, context_len)
        } else {
            ModelConfig::static_(self.cascades, context_len)
        };
        ModelConfig {
            block: CnnBlockSpec {
                channels: self.channels,
                kernel: self.kernel,
            },
            df_lambda: self.df_lambda,
            precision: self.precision,
            ..base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_stage1")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage2")]
    pub stage2_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clip: Option<f64>,
}

fn default_stage1() -> usize {
    10
}
fn default_stage2() -> usize {
    20
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage1_epochs: default_stage1(),
            stage2_epochs: default_stage2(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed: 0,
            clip: None,
        }
    }
}

impl TrainSection {
    pub fn stage(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            epochs: if stage == 1 { self.stage1_epochs } else { self.stage2_epochs },
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    /// Fully sampled centre fraction per pattern; pattern defaults otherwise.
    #[serde(default)]
    pub center_fraction: BTreeMap<MaskPattern, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSection {
    pub fn center_fraction(&self, pattern: MaskPattern) -> f64 {
        self.center_fraction
            .get(&pattern)
            .copied()
            .unwrap_or_else(|| pattern.default_center_fraction())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_sweep_start")]
    pub start: f64,
    #[serde(default = "default_sweep_stop")]
    pub stop: f64,
    #[serde(default = "default_sweep_step")]
    pub step: f64,
    /// Explicit grid; replaces start/stop/step when present.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

fn default_sweep_start() -> f64 {
    2.4
}
fn default_sweep_stop() -> f64 {
    7.6
}
fn default_sweep_step() -> f64 {
    0.2
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            start: default_sweep_start(),
            stop: default_sweep_stop(),
            step: default_sweep_step(),
            values: None,
        }
    }
}

/// Grid points are rounded to 1e-9 so that `2.4 + 3·0.2` prints as `3`.
fn tidy(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

impl SweepSection {
    /// Full grid, before trained accelerations are excluded.
    pub fn grid(&self) -> Vec<f64> {
        match &self.values {
            Some(v) => v.iter().map(|&x| tidy(x)).collect(),
            None => {
                let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
                (0..=n).map(|i| tidy(self.start + i as f64 * self.step)).collect()
            }
        }
    }

    /// Splits the grid into unseen points and those that coincide with a
    /// trained acceleration.
    pub fn split(&self, trained: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.grid()
            .into_iter()
            .partition(|r| !trained.iter().any(|t| (t - r).abs() < 1e-6))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_accelerations")]
    pub accelerations: Vec<f64>,
    #[serde(default = "default_patterns")]
    pub patterns: Vec<MaskPattern>,
    /// Dataset roots, one per study.
    pub datasets: Vec<PathBuf>,
    /// Context vector layout; derived from the grid when absent.
    #[serde(default)]
    pub encoding: Option<ContextEncoding>,
    #[serde(default = "default_roster")]
    pub roster: Vec<RosterModel>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub masks: MaskSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Train roster models that have no checkpoint yet. When false a missing
    /// checkpoint is an error.
    #[serde(default = "default_true")]
    pub train_missing: bool,
    /// Existing checkpoints to use instead of training, keyed by roster name
    /// (`mac`, `jcm`, or `csm/<context label>`).
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Write reconstructions and residuals for every test image.
    #[serde(default = "default_true")]
    pub save_images: bool,
}

fn default_accelerations() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_patterns() -> Vec<MaskPattern> {
    vec![MaskPattern::Gaussian]
}
fn default_roster() -> Vec<RosterModel> {
    vec![RosterModel::Zf, RosterModel::Jcm, RosterModel::Mac]
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Minimal config with every optional section at its default.
    pub fn new(name: &str, kind: ExperimentKind, datasets: Vec<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            name: name.to_string(),
            kind,
            accelerations: if kind == ExperimentKind::UnseenSweep {
                vec![2.0, 3.3, 4.0, 5.0, 8.0]
            } else {
                default_accelerations()
            },
            patterns: default_patterns(),
            datasets,
            encoding: None,
            roster: default_roster(),
            output_dir: output_dir.into(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            masks: MaskSection::default(),
            sweep: SweepSection::default(),
            train_missing: true,
            checkpoints: BTreeMap::new(),
            save_images: true,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The context encoding in effect.
    pub fn effective_encoding(&self) -> ContextEncoding {
        self.encoding.unwrap_or(match self.kind {
            ExperimentKind::FixedStudy if self.patterns.len() > 1 => ContextEncoding::AccelerationPattern,
            ExperimentKind::FixedMask if self.datasets.len() > 1 => ContextEncoding::AccelerationStudy,
            _ => ContextEncoding::Acceleration,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\', ',', '\n']) {
            return fail(format!("name {:?} must be non-empty without '/', '\\\\', ',' or newlines", self.name));
        }
        if self.accelerations.is_empty() {
            return fail("accelerations must not be empty".into());
        }
        for (i, r) in self.accelerations.iter().enumerate() {
            if !(r.is_finite() && *r >= 1.0) {
                return fail(format!("acceleration {r} must be finite and >= 1"));
            }
            if self.accelerations[..i].iter().any(|q| (q - r).abs() < 1e-6) {
                return fail(format!("acceleration {r} listed twice"));
            }
        }
        if self.patterns.is_empty() {
            return fail("patterns must not be empty".into());
        }
        if self.datasets.is_empty() {
            return fail("datasets must list at least one root".into());
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if self.patterns[..i].contains(p) {
                return fail(format!("pattern {} listed twice", p.name()));
            }
        }
        if self.roster.is_empty() {
            return fail("roster must not be empty".into());
        }
        for (i, m) in self.roster.iter().enumerate() {
            if self.roster[..i].contains(m) {
                return fail(format!("roster lists {} twice", m.name()));
            }
        }
        let encoding = self.effective_encoding();
        match self.kind {
            ExperimentKind::FixedStudy => {
                if self.datasets.len() != 1 {
                    return fail("fixed_study uses exactly one dataset".into());
                }
                if self.patterns.len() > 1 && encoding != ContextEncoding::AccelerationPattern {
                    return fail("several patterns need the acceleration_pattern encoding".into());
                }
            }
            ExperimentKind::FixedMask => {
                if self.patterns.len() != 1 {
                    return fail("fixed_mask uses exactly one pattern".into());
                }
                if self.datasets.len() > 1 && encoding != ContextEncoding::AccelerationStudy {
                    return fail("several datasets need the acceleration_study encoding".into());
                }
            }
            ExperimentKind::UnseenSweep => {
                if encoding.len() != 1 {
                    return fail("unseen_sweep needs a one-element context vector (encoding acceleration)".into());
                }
                if self.datasets.len() != 1 || self.patterns.len() != 1 {
                    return fail("unseen_sweep uses one dataset and one pattern".into());
                }
                if self.roster.contains(&RosterModel::Csm) {
                    return fail("csm models cannot be evaluated on unseen contexts".into());
                }
                let s = &self.sweep;
                match &s.values {
                    Some(v) if v.is_empty() => return fail("sweep.values must not be empty".into()),
                    Some(v) if v.iter().any(|r| !(r.is_finite() && *r >= 1.0)) => {
                        return fail("sweep values must be finite and >= 1".into())
                    }
                    Some(_) => {}
                    None => {
                        if !(s.step > 0.0 && s.start >= 1.0 && s.stop >= s.start) {
                            return fail(format!("bad sweep range {}..{} step {}", s.start, s.stop, s.step));
                        }
                    }
                }
            }
        }
        let m = self.model.model_config(true, encoding.len());
        m.validate()?;
        if self.model.channels == 0 {
            return fail("model.channels must be >= 1".into());
        }
        self.train.stage(1).validate()?;
        for (p, cf) in &self.masks.center_fraction {
            if !(cf.is_finite() && (0.0..1.0).contains(cf)) {
                return fail(format!("center fraction {cf} for {} must lie in [0, 1)", p.name()));
            }
        }
        for key in self.checkpoints.keys() {
            let ok = key == "mac" || key == "jcm" || key.starts_with("csm/");
            if !ok {
                return fail(format!("checkpoint key {key:?} must be mac, jcm or csm/<context>"));
            }
        }
        Ok(())
    }
}
