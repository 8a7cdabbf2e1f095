//! Run configuration: flat TOML key/value files with `key=value` overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::ReplacementPolicy;
use crate::domains::TransformParams;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::tensor::OptimizerKind;

/// Training procedure of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dual-stage balanced buffer with the class-weighted loss.
    PneumonetFull,
    /// Reservoir replay.
    Er,
    /// Class-balancing reservoir replay.
    Cbrs,
    /// Sequential training without replay.
    Finetune,
    /// One phase over the union of all domains.
    Joint,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::PneumonetFull,
        Method::Er,
        Method::Cbrs,
        Method::Finetune,
        Method::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PneumonetFull => "pneumonet_full",
            Method::Er => "er",
            Method::Cbrs => "cbrs",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    /// Weighted for `pneumonet_full`, unweighted otherwise.
    #[default]
    Auto,
    Weighted,
    Unweighted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferChoice {
    /// Whatever the method prescribes.
    #[default]
    Auto,
    Dual,
    Reservoir,
    Cbrs,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_domain: usize,
    /// Total replay capacity; the dual-stage buffer holds half per class.
    pub buffer_size: usize,
    pub replay_ratio: f64,
    pub seed: u64,
    pub loss: LossChoice,
    pub buffer: BufferChoice,
    pub replacement: ReplacementPolicy,
    pub reset_optimizer_per_domain: bool,
    pub eval_batch_size: usize,
    /// Seeds the domain transforms; shared across run seeds so every run
    /// sees the same benchmark.
    pub domain_seed: u64,
    pub merge_val: bool,
    /// Use only the first N training samples of each domain (0 = all).
    pub max_train_per_domain: usize,
    /// NPZ archive or flat dataset directory.
    pub data: String,
    #[serde(flatten)]
    pub transforms: TransformParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::PneumonetFull,
            architecture: Architecture::Pneumonet,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 32,
            epochs_per_domain: 50,
            buffer_size: 500,
            replay_ratio: 1.0,
            seed: 1,
            loss: LossChoice::Auto,
            buffer: BufferChoice::Auto,
            replacement: ReplacementPolicy::Reservoir,
            reset_optimizer_per_domain: false,
            eval_batch_size: 256,
            domain_seed: 0,
            merge_val: false,
            max_train_per_domain: 0,
            data: "data/pneumoniamnist".to_string(),
            transforms: TransformParams::default(),
        }
    }
}

/// Named starting points for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// The published protocol: 50 epochs per domain, buffer 500.
    Full,
    /// 3 epochs per domain, buffer 100.
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "smoke" => Ok(Preset::Smoke),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected full or smoke)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => RunConfig::default(),
            Preset::Smoke => RunConfig {
                epochs_per_domain: 3,
                buffer_size: 100,
                ..RunConfig::default()
            },
        }
    }

    /// Every accepted key.
    pub fn valid_keys() -> BTreeSet<String> {
        match toml::Value::try_from(RunConfig::default()).expect("config serializes") {
            toml::Value::Table(t) => t.keys().cloned().collect(),
            _ => unreachable!("config is a table"),
        }
    }

    fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    fn check_keys<'a>(keys: impl IntoIterator<Item = &'a String>) -> Result<()> {
        let valid = Self::valid_keys();
        let unknown: Vec<&String> = keys.into_iter().filter(|k| !valid.contains(*k)).collect();
        if unknown.is_empty() {
            return Ok(());
        }
        Err(Error::Config(format!(
            "unknown key(s) {}; valid keys: {}",
            unknown.iter().map(|k| format!("`{k}`")).collect::<Vec<_>>().join(", "),
            valid.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        Self::check_keys(table.keys())?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays TOML `text` on `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::check_keys(overlay.keys())?;
        let mut table = self.to_table();
        table.extend(overlay);
        Self::from_table(table)
    }

    pub fn from_file(base: &RunConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        base.merge_toml(&text)
    }

    /// Applies `key=value` overrides. Values are TOML literals; bare words are strings.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut table = self.to_table();
        for set in sets {
            let (key, value) = parse_assignment(set.as_ref())?;
            Self::check_keys([&key])?;
            table.insert(key, value);
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be at least 1".into()));
        }
        if !(self.replay_ratio >= 0.0 && self.replay_ratio.is_finite()) {
            return Err(Error::Config("replay_ratio must be a finite value >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let t = &self.transforms;
        if t.anatomical_scale_min <= 0.0 || t.anatomical_scale_max < t.anatomical_scale_min {
            return Err(Error::Config("anatomical scale range must be positive and ordered".into()));
        }
        if t.anatomical_max_shift < 0 || t.lowdose_noise_sigma < 0.0 || t.portable_brightness < 0.0 {
            return Err(Error::Config("transform magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn uses_weighted_loss(&self) -> bool {
        match self.loss {
            LossChoice::Weighted => true,
            LossChoice::Unweighted => false,
            LossChoice::Auto => self.method == Method::PneumonetFull,
        }
    }

    pub fn buffer_kind(&self) -> BufferChoice {
        match (self.buffer, self.method) {
            (BufferChoice::Auto, Method::PneumonetFull) => BufferChoice::Dual,
            (BufferChoice::Auto, Method::Er) => BufferChoice::Reservoir,
            (BufferChoice::Auto, Method::Cbrs) => BufferChoice::Cbrs,
            (BufferChoice::Auto, Method::Finetune | Method::Joint) => BufferChoice::None,
            (explicit, _) => explicit,
        }
    }

    /// This configuration with run-identity fields cleared, for grouping seeds.
    pub fn without_seed(&self) -> RunConfig {
        RunConfig {
            seed: 0,
            ..self.clone()
        }
    }
}

/// Splits `key=value` and parses the value as a TOML literal.
pub fn parse_assignment(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}
