//! Run configuration: every module config plus artifact paths, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic};
use crate::model::{ModelConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::timeseries::{InjectConfig, SplitSpec, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub labels: PathBuf,
    pub cache: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "series.csv".into(),
            labels: "labels.json".into(),
            cache: "signatures.bin".into(),
            checkpoint: "model.ckpt".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    /// Relocate every relative path under `root`.
    pub fn rooted(&self, root: &Path) -> Self {
        let f = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                root.join(p)
            }
        };
        Self {
            data: f(&self.data),
            labels: f(&self.labels),
            cache: f(&self.cache),
            checkpoint: f(&self.checkpoint),
            reports: f(&self.reports),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Anchor slack on each side of a label when matching; `None` uses the anchor gap.
    pub tolerance: Option<usize>,
    pub k: usize,
    pub lambdas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: None,
            k: 3,
            lambdas: vec![0.2, 0.25, 0.3, 0.35, 0.4, 0.45],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub verbosity: u8,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub inject: InjectConfig,
    pub splits: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper_synthetic()
    }
}

pub const PRESETS: [&str; 2] = ["paper-synthetic", "toy"];

impl RunConfig {
    /// 30 series of 20000 steps, five injected anomalies, full-width network.
    pub fn paper_synthetic() -> Self {
        let mut cfg = Self {
            seed: 0,
            verbosity: 1,
            threads: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            inject: InjectConfig::default(),
            splits: SplitSpec::proportional(20_000),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.apply_seed(0);
        cfg
    }

    /// 10 series of 2000 steps and a narrow network, for minutes-scale runs.
    pub fn toy() -> Self {
        let mut cfg = Self::paper_synthetic();
        cfg.synth.n = 10;
        cfg.synth.len = 2000;
        cfg.splits = SplitSpec::proportional(2000);
        cfg.inject.region = [1000, 2000];
        cfg.inject.reference = [0, 800];
        cfg.model.n = 10;
        cfg.model.channels = [8, 16, 32, 64];
        cfg.train.epochs = 30;
        cfg.train.batch_size = 8;
        cfg.train.adam.lr = 3e-3;
        cfg.apply_seed(0);
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-synthetic" => Ok(Self::paper_synthetic()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Set the global seed and the per-stage seeds derived from it.
    /// Derived seeds keep 63 bits so they fit a TOML integer.
    pub fn apply_seed(&mut self, seed: u64) {
        let stage = |k| derive_seed(seed, k) >> 1;
        self.seed = seed;
        self.synth.seed = stage(1);
        self.inject.seed = stage(2);
        self.train.seed = stage(3);
    }

    pub fn tolerance(&self) -> usize {
        self.eval.tolerance.unwrap_or(self.model.gap)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.splits.validate(self.synth.len)?;
        if self.model.n != self.synth.n {
            return Err(Error::Config(format!(
                "model.n = {} but synth.n = {}",
                self.model.n, self.synth.n
            )));
        }
        if !(1.0..=2.0).contains(&self.detect.beta) {
            return Err(Error::Config(format!(
                "detect.beta must be in [1, 2], got {}",
                self.detect.beta
            )));
        }
        if !(self.detect.quantile > 0.0 && self.detect.quantile < 1.0) {
            return Err(Error::Config("detect.quantile must be in (0, 1)".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1) as u64)
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_owned(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn synthetic_preset_layout() {
        let cfg = RunConfig::paper_synthetic();
        assert_eq!((cfg.synth.n, cfg.synth.len), (30, 20_000));
        assert_eq!(cfg.inject.count, 5);
        assert_eq!(cfg.inject.durations, [30, 60, 90]);
        assert_eq!(cfg.splits.test, [10_000, 20_000]);
        assert_eq!(cfg.model.scales, [10, 30, 60]);
    }

    #[test]
    fn toy_preset_layout() {
        let cfg = RunConfig::toy();
        assert_eq!((cfg.synth.n, cfg.synth.len, cfg.model.n), (10, 2000, 10));
        assert_eq!(cfg.model.channels, [8, 16, 32, 64]);
        assert_eq!(cfg.splits.train, [0, 800]);
        assert_eq!(cfg.inject.region, [1000, 2000]);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[model]\nh = 3\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.h, 3);
        assert_eq!(cfg.model.n, 30);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = RunConfig::from_toml("seed = 1\n[model]\nh = \"x\"\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn mismatched_n_rejected() {
        let mut cfg = RunConfig::toy();
        cfg.model.n = 12;
        assert!(cfg.validate().is_err());
    }
}
