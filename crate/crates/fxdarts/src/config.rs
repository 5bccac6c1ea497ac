//! Run configuration: flat key=value files with CLI overrides.
//!
//! Precedence is CLI > file > defaults: parsing starts from
//! [`RunConfig::default`] and applies file pairs, then override pairs,
//! through the same setter.

use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

use crate::data::{DatasetKind, DatasetSpec};
use crate::ess::EssConfig;
use crate::ops::SpaceId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Retraining hyper-parameters for `eval`: SGD with momentum, cosine decay
/// to zero, and global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            clip: 5.0,
            batch_size: 32,
        }
    }
}

/// Complete description of a reproducible run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub batch_size: usize,
    pub augment: bool,
    /// L
    pub cells: usize,
    /// N
    pub nodes: usize,
    pub init_channels: usize,
    pub space: SpaceId,
    pub ess: EssConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a minutes-scale search on 8x8 synthetic data
    /// (two rounds of eight epochs over a 4-cell, 5-node super-network).
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: DatasetSpec::default(),
            batch_size: 16,
            augment: false,
            cells: 4,
            nodes: 5,
            init_channels: 8,
            space: SpaceId::O2,
            ess: EssConfig {
                t_search: 8,
                r_init: 2,
                ..EssConfig::default()
            },
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_opt<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<Option<T>, ConfigError> {
    if value.is_empty() || value == "none" {
        return Ok(None);
    }
    parse(key, value, expected).map(Some)
}

impl RunConfig {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value, "u64")?,
            "dataset" => {
                self.dataset.kind = match value {
                    "blobs" => DatasetKind::SyntheticBlobs,
                    "digits" => DatasetKind::DownsampledDigits,
                    v if v.starts_with("folder:") => {
                        DatasetKind::ImageFolder(PathBuf::from(&v["folder:".len()..]))
                    }
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "blobs | digits | folder:<path>",
                        })
                    }
                }
            }
            "resolution" => self.dataset.resolution = parse(key, value, "usize")?,
            "classes" => self.dataset.classes = parse(key, value, "usize")?,
            "channels" => self.dataset.channels = parse(key, value, "usize")?,
            "samples" => self.dataset.samples = parse(key, value, "usize")?,
            "train_fraction" => self.dataset.train_fraction = parse(key, value, "f64")?,
            "batch_size" => self.batch_size = parse(key, value, "usize")?,
            "augment" => self.augment = parse(key, value, "bool")?,
            "cells" => self.cells = parse(key, value, "usize")?,
            "nodes" => self.nodes = parse(key, value, "usize")?,
            "init_channels" => self.init_channels = parse(key, value, "usize")?,
            "space" => {
                self.space = SpaceId::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected: "O1 | O2 | O3",
                })?
            }
            "c1" => self.ess.c1 = parse(key, value, "f64")?,
            "c2" => self.ess.c2 = parse(key, value, "f64")?,
            "lambda_init" => self.ess.lambda_init = parse(key, value, "f64")?,
            "t_search" => self.ess.t_search = parse(key, value, "usize")?,
            "t_warm" => self.ess.t_warm = parse_opt(key, value, "usize")?,
            "r_init" => self.ess.r_init = parse(key, value, "usize")?,
            "eta_theta" => self.ess.eta_theta = parse(key, value, "f64")?,
            "theta_weight_decay" => self.ess.theta_weight_decay = parse(key, value, "f64")?,
            "eta_alpha" => self.ess.eta_alpha = parse(key, value, "f64")?,
            "alpha_weight_decay" => self.ess.alpha_weight_decay = parse(key, value, "f64")?,
            "epsilon" => self.ess.epsilon = parse(key, value, "f64")?,
            "delta_e" => self.ess.delta_e = parse_opt(key, value, "f64")?,
            "warmup_updates_alpha" => self.ess.warmup_updates_alpha = parse(key, value, "bool")?,
            "archopt_updates_theta" => self.ess.archopt_updates_theta = parse(key, value, "bool")?,
            "ce_loss_weight" => self.ess.ce_loss_weight = parse(key, value, "f64")?,
            "h_min" => self.ess.h_min = parse_opt(key, value, "f64")?,
            "eval_epochs" => self.eval.epochs = parse(key, value, "usize")?,
            "eval_lr" => self.eval.lr = parse(key, value, "f64")?,
            "eval_momentum" => self.eval.momentum = parse(key, value, "f64")?,
            "eval_weight_decay" => self.eval.weight_decay = parse(key, value, "f64")?,
            "eval_clip" => self.eval.clip = parse(key, value, "f64")?,
            "eval_batch_size" => self.eval.batch_size = parse(key, value, "usize")?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a key=value document on top of the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse_kv(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        config.apply_kv(text)?;
        Ok(config)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse_kv(&std::fs::read_to_string(path)?)
    }

    /// Serializes every field in a fixed order. Optional fields are
    /// omitted while unset, so parse -> serialize -> parse is exact.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let dataset = match &self.dataset.kind {
            DatasetKind::SyntheticBlobs => "blobs".to_string(),
            DatasetKind::DownsampledDigits => "digits".to_string(),
            DatasetKind::ImageFolder(p) => format!("folder:{}", p.display()),
        };
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "dataset = {dataset}").unwrap();
        writeln!(s, "resolution = {}", self.dataset.resolution).unwrap();
        writeln!(s, "classes = {}", self.dataset.classes).unwrap();
        writeln!(s, "channels = {}", self.dataset.channels).unwrap();
        writeln!(s, "samples = {}", self.dataset.samples).unwrap();
        writeln!(s, "train_fraction = {}", self.dataset.train_fraction).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "augment = {}", self.augment).unwrap();
        writeln!(s, "cells = {}", self.cells).unwrap();
        writeln!(s, "nodes = {}", self.nodes).unwrap();
        writeln!(s, "init_channels = {}", self.init_channels).unwrap();
        writeln!(s, "space = {}", self.space.as_str()).unwrap();
        writeln!(s, "c1 = {}", self.ess.c1).unwrap();
        writeln!(s, "c2 = {}", self.ess.c2).unwrap();
        writeln!(s, "lambda_init = {}", self.ess.lambda_init).unwrap();
        writeln!(s, "t_search = {}", self.ess.t_search).unwrap();
        if let Some(t) = self.ess.t_warm {
            writeln!(s, "t_warm = {t}").unwrap();
        }
        writeln!(s, "r_init = {}", self.ess.r_init).unwrap();
        writeln!(s, "eta_theta = {}", self.ess.eta_theta).unwrap();
        writeln!(s, "theta_weight_decay = {}", self.ess.theta_weight_decay).unwrap();
        writeln!(s, "eta_alpha = {}", self.ess.eta_alpha).unwrap();
        writeln!(s, "alpha_weight_decay = {}", self.ess.alpha_weight_decay).unwrap();
        writeln!(s, "epsilon = {}", self.ess.epsilon).unwrap();
        if let Some(d) = self.ess.delta_e {
            writeln!(s, "delta_e = {d}").unwrap();
        }
        writeln!(s, "warmup_updates_alpha = {}", self.ess.warmup_updates_alpha).unwrap();
        writeln!(s, "archopt_updates_theta = {}", self.ess.archopt_updates_theta).unwrap();
        writeln!(s, "ce_loss_weight = {}", self.ess.ce_loss_weight).unwrap();
        if let Some(h) = self.ess.h_min {
            writeln!(s, "h_min = {h}").unwrap();
        }
        writeln!(s, "eval_epochs = {}", self.eval.epochs).unwrap();
        writeln!(s, "eval_lr = {}", self.eval.lr).unwrap();
        writeln!(s, "eval_momentum = {}", self.eval.momentum).unwrap();
        writeln!(s, "eval_weight_decay = {}", self.eval.weight_decay).unwrap();
        writeln!(s, "eval_clip = {}", self.eval.clip).unwrap();
        writeln!(s, "eval_batch_size = {}", self.eval.batch_size).unwrap();
        writeln!(s, "out_dir = {}", self.out_dir.display()).unwrap();
        s
    }

    pub fn net_dims(&self) -> crate::supernet::NetDims {
        crate::supernet::NetDims {
            cells: self.cells,
            nodes: self.nodes,
            channels: self.init_channels,
            in_channels: self.dataset.channels,
            input_hw: self.dataset.resolution,
            classes: self.dataset.classes,
        }
    }

    pub fn rebuild_spec(&self) -> crate::discretize::RebuildSpec {
        crate::discretize::RebuildSpec {
            channels: self.init_channels,
            in_channels: self.dataset.channels,
            input_hw: self.dataset.resolution,
            classes: self.dataset.classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut config = RunConfig::default();
        config.seed = 7;
        config.ess.t_warm = Some(3);
        config.ess.delta_e = Some(1.25e-4);
        let text = config.to_kv_string();
        let parsed = RunConfig::parse_kv(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.to_kv_string(), text);
    }

    #[test]
    fn cli_overrides_beat_file_values() {
        let mut config = RunConfig::parse_kv("seed = 1\nspace = O1\n").unwrap();
        config.set("space", "O3").unwrap();
        assert_eq!(config.space, SpaceId::O3);
        assert_eq!(config.seed, 1);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let config = RunConfig::parse_kv("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(config.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse_kv("nope = 1\n"),
            Err(ConfigError::UnknownKey(_))
        ));
    }
}
