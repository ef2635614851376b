// SPDX-License-Identifier: Apache-2.0

//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Every key has a
//! default; unknown keys and repeated keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use easa_core::augment::{DEFAULT_GRID, DEFAULT_SIGMA};
use easa_core::matching::Metric;
use easa_core::train::DEFAULT_LAMBDA;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
    #[error("cannot read {0}")]
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dim: usize,
    pub seed: u64,
    pub k: usize,
    pub metric: Metric,
    pub sigma: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub zipf_exponent: f64,
    pub n_radicals: usize,
    pub n_classes: usize,
    pub seen_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda_fewshot: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 42,
            k: 5,
            metric: Metric::Cosine,
            sigma: DEFAULT_SIGMA,
            grid_w: DEFAULT_GRID,
            grid_h: DEFAULT_GRID,
            zipf_exponent: 1.0,
            n_radicals: 12,
            n_classes: 60,
            seen_fraction: 2.0 / 3.0,
            epochs: 30,
            lr: 0.5,
            tau: 0.1,
            lambda_fewshot: DEFAULT_LAMBDA,
        }
    }
}

pub const KEYS: [&str; 15] = [
    "dim",
    "seed",
    "k",
    "metric",
    "sigma",
    "grid_w",
    "grid_h",
    "zipf_exponent",
    "n_radicals",
    "n_classes",
    "seen_fraction",
    "epochs",
    "lr",
    "tau",
    "lambda_fewshot",
];

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(key);
            cfg.set(line, key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| ConfigError::Unreadable(path.display().to_string()))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dim" => self.dim = parse_value(line, key, value)?,
            "seed" => self.seed = parse_value(line, key, value)?,
            "k" => self.k = parse_value(line, key, value)?,
            "metric" => self.metric = parse_value(line, key, value)?,
            "sigma" => self.sigma = parse_value(line, key, value)?,
            "grid_w" => self.grid_w = parse_value(line, key, value)?,
            "grid_h" => self.grid_h = parse_value(line, key, value)?,
            "zipf_exponent" => self.zipf_exponent = parse_value(line, key, value)?,
            "n_radicals" => self.n_radicals = parse_value(line, key, value)?,
            "n_classes" => self.n_classes = parse_value(line, key, value)?,
            "seen_fraction" => self.seen_fraction = parse_value(line, key, value)?,
            "epochs" => self.epochs = parse_value(line, key, value)?,
            "lr" => self.lr = parse_value(line, key, value)?,
            "tau" => self.tau = parse_value(line, key, value)?,
            "lambda_fewshot" => self.lambda_fewshot = parse_value(line, key, value)?,
            _ => unreachable!("key checked against KEYS"),
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dim = {}", self.dim)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "k = {}", self.k)?;
        writeln!(f, "metric = {}", self.metric)?;
        writeln!(f, "sigma = {}", self.sigma)?;
        writeln!(f, "grid_w = {}", self.grid_w)?;
        writeln!(f, "grid_h = {}", self.grid_h)?;
        writeln!(f, "zipf_exponent = {}", self.zipf_exponent)?;
        writeln!(f, "n_radicals = {}", self.n_radicals)?;
        writeln!(f, "n_classes = {}", self.n_classes)?;
        writeln!(f, "seen_fraction = {}", self.seen_fraction)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "tau = {}", self.tau)?;
        writeln!(f, "lambda_fewshot = {}", self.lambda_fewshot)
    }
}
