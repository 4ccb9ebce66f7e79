//! Declarative experiment description.
//!
//! Configs are TOML files with one section per subsystem. Every key has a
//! default; unknown keys and out-of-range values are rejected with the
//! offending dotted field name. `key=value` overrides are applied to the
//! parsed table before validation, and the effective config is written
//! back out next to a run's outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::AttackConfig;
use crate::error::{Error, Result};
use crate::optimizer::RegularizerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Clusters,
    Images,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    /// Feature dimension for `clusters`.
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Training-pool examples per class (before the validation split).
    pub per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub contrast: f64,
    pub noise: f64,
    pub max_shift: usize,
    /// Peak of the class-located blob in `images`; 0 disables it.
    pub blob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<String>,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Clusters,
            classes: 4,
            dim: 16,
            height: 8,
            width: 8,
            channels: 1,
            per_class: 250,
            test_per_class: 250,
            separation: 4.0,
            contrast: 0.5,
            noise: 0.2,
            max_shift: 1,
            blob: 0.0,
            path: None,
            test_path: None,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths for `mlp`.
    pub hidden: Vec<usize>,
    /// Conv block widths for `cnn`.
    pub channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden: vec![64],
            channels: vec![8, 16],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeKind {
    Fixed,
    Adaptive,
    Adadecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub mode: ModeKind,
    /// Fixed or AdaDecay decay coefficient.
    pub lambda: f64,
    pub dog: f64,
    pub alpha: f64,
    pub ema_old: f64,
    pub ema_new: f64,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: ScheduleKind,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            mode: ModeKind::Fixed,
            lambda: 0.0005,
            dog: 0.016,
            alpha: 4.0,
            ema_old: 0.1,
            ema_new: 0.9,
            lr: 0.1,
            momentum: 0.9,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl OptimConfig {
    pub fn regularizer(&self) -> RegularizerMode {
        match self.mode {
            ModeKind::Fixed => RegularizerMode::Fixed { lambda: self.lambda },
            ModeKind::Adaptive => RegularizerMode::Adaptive {
                dog: self.dog,
                ema_old: self.ema_old,
                ema_new: self.ema_new,
            },
            ModeKind::Adadecay => RegularizerMode::AdaDecay {
                lambda: self.lambda,
                alpha: self.alpha,
            },
        }
    }

    /// The value on the decay axis of a grid: `dog` for adaptive runs, `lambda` otherwise.
    pub fn decay_value(&self) -> f64 {
        match self.mode {
            ModeKind::Adaptive => self.dog,
            _ => self.lambda,
        }
    }

    pub fn set_decay_value(&mut self, v: f64) {
        match self.mode {
            ModeKind::Adaptive => self.dog = v,
            _ => self.lambda = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub log_stride: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            log_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Adversarial training on/off. Robust evaluation uses the eval settings regardless.
    pub enabled: bool,
    pub epsilon: f64,
    pub step_size: f64,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            train_steps: 7,
            eval_steps: 20,
            random_start: true,
        }
    }
}

impl AttackSection {
    pub fn train_attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.train_steps,
            random_start: self.random_start,
            bounds: (0.0, 1.0),
        }
    }

    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            steps: self.eval_steps,
            ..self.train_attack()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pad_crop: bool,
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad_crop: false,
            pad: 4,
            flip: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStopRule {
    CleanVal,
    RobustVal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub rule: EarlyStopRule,
    /// Evaluate the rule every `stride` epochs.
    pub stride: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            rule: EarlyStopRule::CleanVal,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DogConfig {
    pub tol: f64,
    pub patience: usize,
}

impl Default for DogConfig {
    fn default() -> Self {
        Self { tol: 1e-3, patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub noise: NoiseConfig,
    pub augment: AugmentConfig,
    pub early_stop: EarlyStopConfig,
    pub dog: DogConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            noise: NoiseConfig::default(),
            augment: AugmentConfig::default(),
            early_stop: EarlyStopConfig::default(),
            dog: DogConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        check(d.classes >= 2, "dataset.classes", "must be >= 2")?;
        check(d.per_class >= 2, "dataset.per_class", "must be >= 2")?;
        check(d.test_per_class >= 1, "dataset.test_per_class", "must be >= 1")?;
        check(
            d.val_fraction > 0.0 && d.val_fraction < 1.0,
            "dataset.val_fraction",
            "must be in (0, 1)",
        )?;
        match d.kind {
            DatasetKind::Clusters => {
                check(d.dim >= d.classes, "dataset.dim", "must be >= dataset.classes")?;
                check(d.separation >= 0.0, "dataset.separation", "must be >= 0")?;
            }
            DatasetKind::Images => {
                check(d.height >= 8 && d.width >= 8, "dataset.height", "images must be at least 8×8")?;
                check(d.channels >= 1, "dataset.channels", "must be >= 1")?;
                check((0.0..=1.0).contains(&d.contrast), "dataset.contrast", "must be in [0, 1]")?;
                check((0.0..=1.0).contains(&d.blob), "dataset.blob", "must be in [0, 1]")?;
                check(d.noise >= 0.0, "dataset.noise", "must be >= 0")?;
            }
            DatasetKind::File => {
                check(d.path.is_some(), "dataset.path", "required for kind = \"file\"")?;
            }
        }
        match self.model.kind {
            ModelKind::Mlp => check(
                self.model.hidden.iter().all(|&h| h > 0),
                "model.hidden",
                "widths must be positive",
            )?,
            ModelKind::Cnn => check(
                !self.model.channels.is_empty() && self.model.channels.iter().all(|&c| c > 0),
                "model.channels",
                "need at least one positive width",
            )?,
        }
        let o = &self.optim;
        check(o.lr > 0.0 && o.lr.is_finite(), "optim.lr", "must be > 0")?;
        check((0.0..1.0).contains(&o.momentum), "optim.momentum", "must be in [0, 1)")?;
        o.regularizer().validate()?;
        check(self.train.batch_size >= 1, "train.batch_size", "must be >= 1")?;
        check(self.train.log_stride >= 1, "train.log_stride", "must be >= 1")?;
        check(self.train.epochs <= 100_000, "train.epochs", "must be <= 100000")?;
        self.attack.train_attack().validate()?;
        check(self.attack.eval_steps >= 1, "attack.eval_steps", "must be >= 1")?;
        check((0.0..=1.0).contains(&self.noise.rate), "noise.rate", "must be in [0, 1]")?;
        check(self.early_stop.stride >= 1, "early_stop.stride", "must be >= 1")?;
        check(self.dog.tol >= 0.0, "dog.tol", "must be >= 0")?;
        check(self.dog.patience >= 1, "dog.patience", "must be >= 1")?;
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides to an already-built config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml(), overrides)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    cursor.insert(last.to_owned(), value);
    Ok(())
}
