//! Run configuration: TOML file, dotted command-line overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::dataset::{InputFormat, TrainingMode};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_KS;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: InputFormat,
    /// Minimum interactions per user and per item.
    pub min_count: usize,
    pub training_mode: TrainingMode,
    /// With `all-prefix`, keep only the last this-many targets per user (0 keeps all).
    pub targets_per_user: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/ml-100k/u.data"),
            format: InputFormat::MovielensTab,
            min_count: 5,
            training_mode: TrainingMode::LastTarget,
            targets_per_user: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Initial Gumbel temperature.
    pub tau: f64,
    /// Initial contrastive temperature.
    pub tau_c: f64,
    /// Batches between two temperature decays.
    pub anneal_period: usize,
    pub anneal_factor: f64,
    pub tau_floor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub ks: Vec<usize>,
    /// Compute in `f64` instead of `f32`.
    pub double: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            eval_batch_size: 512,
            lr: 1e-3,
            lambda: 0.2,
            beta: 1e-4,
            tau: 0.5,
            tau_c: 0.5,
            anneal_period: 40,
            anneal_factor: 0.995,
            tau_floor: 0.1,
            patience: 10,
            max_epochs: 300,
            ks: DEFAULT_KS.to_vec(),
            double: false,
        }
    }
}

/// Planted-noise experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub clusters: usize,
    /// Real items (the padding row comes on top).
    pub items: usize,
    pub users: usize,
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of users whose sequences are held out for detection scoring.
    pub holdout: f64,
    pub epochs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 10,
            items: 500,
            users: 2000,
            noise: 0.2,
            min_len: 10,
            max_len: 30,
            holdout: 0.2,
            epochs: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where checkpoints, logs and reports are written.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumSchedule,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    /// Parses `text`, applies `key.path=value` overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.curriculum.validate()?;
        let t = &self.train;
        let positive_counts = [
            ("train.batch_size", t.batch_size),
            ("train.eval_batch_size", t.eval_batch_size),
            ("train.anneal_period", t.anneal_period),
            ("train.max_epochs", t.max_epochs),
            ("data.min_count", self.data.min_count),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let positive_reals = [
            ("train.lr", t.lr),
            ("train.tau", t.tau),
            ("train.tau_c", t.tau_c),
            ("train.tau_floor", t.tau_floor),
        ];
        for (name, v) in positive_reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("train.lambda", t.lambda), ("train.beta", t.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(t.anneal_factor > 0.0 && t.anneal_factor <= 1.0) {
            return Err(Error::Config(format!(
                "train.anneal_factor must lie in (0, 1], got {}",
                t.anneal_factor
            )));
        }
        if t.ks.is_empty() || t.ks.contains(&0) {
            return Err(Error::Config("train.ks must list positive cutoffs".into()));
        }
        if !t.ks.contains(&20) {
            return Err(Error::Config(
                "train.ks must include 20, the early-stopping cutoff".into(),
            ));
        }
        let s = &self.synth;
        if s.clusters < 2
            || s.items < s.clusters
            || s.min_len < 3
            || s.max_len < s.min_len
            || s.users == 0
        {
            return Err(Error::Config(
                "synth needs ≥ 2 clusters, items ≥ clusters, 3 ≤ min_len ≤ max_len, users > 0"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&s.noise) || !(s.holdout > 0.0 && s.holdout < 1.0) {
            return Err(Error::Config(
                "synth.noise must lie in [0, 1) and synth.holdout in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
fn apply_override(root: &mut toml::Table, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{entry}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut table = root;
    for part in parents {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
