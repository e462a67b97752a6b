//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;

use crate::layers::{CombinerKind, MpKind};
use crate::leim::MiEstimator;
use crate::relnet::PatternMask;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub gnn: MpKind,
    pub depth: usize,
    pub estimator: MiEstimator,
    pub combiner: CombinerKind,
    pub mask: PatternMask,
    pub degree_cap: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub seed: u64,
    pub tie_omega_psi: bool,
    pub jsd_as_printed: bool,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    /// Networks up to this many nodes run Ψ over the whole network each step.
    pub full_batch_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            gnn: MpKind::Gat,
            depth: 2,
            estimator: MiEstimator::Jsd,
            combiner: CombinerKind::BiLstm,
            mask: PatternMask::ALL,
            degree_cap: None,
            lr: 0.005,
            batch_size: 256,
            epochs: 50,
            margin: 0.5,
            seed: 0,
            tie_omega_psi: false,
            jsd_as_printed: false,
            classifier_epochs: 500,
            classifier_lr: 0.01,
            full_batch_limit: 5000,
        }
    }
}

pub const KEYS: [&str; 17] = [
    "dim",
    "gnn",
    "depth",
    "estimator",
    "combiner",
    "mask",
    "degree_cap",
    "lr",
    "batch_size",
    "epochs",
    "margin",
    "seed",
    "tie_omega_psi",
    "jsd_as_printed",
    "classifier_epochs",
    "classifier_lr",
    "full_batch_limit",
];

fn invalid(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: reason.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

impl TrainConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dim" => {
                let d: usize = num(key, value)?;
                if d < 2 || !d.is_multiple_of(2) {
                    return Err(invalid(key, value, "must be an even number ≥ 2"));
                }
                self.dim = d;
            }
            "gnn" => self.gnn = value.parse().map_err(|e| invalid(key, value, e))?,
            "depth" => self.depth = num(key, value)?,
            "estimator" => self.estimator = value.parse().map_err(|e| invalid(key, value, e))?,
            "combiner" => self.combiner = value.parse().map_err(|e| invalid(key, value, e))?,
            "mask" => self.mask = PatternMask::parse(value).map_err(|e| invalid(key, value, e))?,
            "degree_cap" => {
                self.degree_cap = match value {
                    "none" | "" => None,
                    v => {
                        let c: usize = num(key, v)?;
                        if c == 0 {
                            return Err(invalid(key, value, "must be positive"));
                        }
                        Some(c)
                    }
                }
            }
            "lr" => self.lr = num(key, value)?,
            "batch_size" => {
                let b: usize = num(key, value)?;
                if b < 2 {
                    return Err(invalid(key, value, "must be at least 2"));
                }
                self.batch_size = b;
            }
            "epochs" => self.epochs = num(key, value)?,
            "margin" => {
                let m: f64 = num(key, value)?;
                if !(0.0..=1.0).contains(&m) {
                    return Err(invalid(key, value, "must lie in [0, 1]"));
                }
                self.margin = m;
            }
            "seed" => self.seed = num(key, value)?,
            "tie_omega_psi" => self.tie_omega_psi = flag(key, value)?,
            "jsd_as_printed" => self.jsd_as_printed = flag(key, value)?,
            "classifier_epochs" => self.classifier_epochs = num(key, value)?,
            "classifier_lr" => self.classifier_lr = num(key, value)?,
            "full_batch_limit" => self.full_batch_limit = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.dim.to_string(),
            self.gnn.to_string(),
            self.depth.to_string(),
            self.estimator.to_string(),
            self.combiner.to_string(),
            self.mask.codes(),
            self.degree_cap.map_or("none".to_owned(), |c| c.to_string()),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.margin.to_string(),
            self.seed.to_string(),
            self.tie_omega_psi.to_string(),
            self.jsd_as_printed.to_string(),
            self.classifier_epochs.to_string(),
            self.classifier_lr.to_string(),
            self.full_batch_limit.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
