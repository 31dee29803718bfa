//! Run configuration: one TOML file per run, written back resolved.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::hypernet::HypernetConfig;
use crate::training::{Stage, TrainConfig};

pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// QA dataset used for pretraining contexts and instruction tuning.
    pub train: Option<PathBuf>,
    /// QA dataset for evaluation; defaults to `train` (held-in evaluation).
    pub eval: Option<PathBuf>,
    /// Corpus for backbone language-model pretraining.
    pub lm: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub hypernet: HypernetConfig,
    pub corpus: CorpusSpec,
    /// Backbone language-model pretraining.
    pub lm: TrainConfig,
    pub pretrain: TrainConfig,
    pub ift: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataPaths,
}

impl Default for RunConfig {
    /// Desk-scale defaults; learning rates are tuned for the toy backbone.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            hypernet: HypernetConfig::default(),
            corpus: CorpusSpec::default(),
            lm: TrainConfig {
                stage: Stage::Backbone,
                lr: 3e-3,
                epochs: 4,
                ..TrainConfig::pretrain()
            },
            pretrain: TrainConfig {
                lr: 2e-3,
                lambda: 0.6,
                batch_size: 4,
                epochs: 1000,
                max_steps: Some(2000),
                max_len: 64,
                ..TrainConfig::pretrain()
            },
            ift: TrainConfig {
                lr: 1e-3,
                epochs: 100,
                ..TrainConfig::ift()
            },
            eval: EvalConfig::default(),
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hypernet.validate(self.backbone.hidden)?;
        self.lm.validate()?;
        self.pretrain.validate()?;
        self.ift.validate()?;
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
