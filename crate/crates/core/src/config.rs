//! The single TOML document holding every module's configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refine::RefineConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and dataset synthesis.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.synth.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "synth.num_classes ({}) differs from model.num_classes ({})",
                self.synth.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Parses and validates a TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}
