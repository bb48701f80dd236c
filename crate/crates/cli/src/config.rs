//! The run configuration file.
//!
//! A TOML document with optional `scheme` key and `[model]`, `[train]`,
//! `[sensor]`, `[synth]` and `[eval]` tables. Missing tables take their
//! defaults; unknown keys are errors.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mfrbp_core::data::SynthConfig;
use mfrbp_core::eval::EvalConfig;
use mfrbp_core::policy::{CspConfig, TrainConfig, TrainingScheme};
use mfrbp_core::recursion::SensorConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    #[default]
    L1rbp,
    L1mfrbp,
    Planning,
}

impl SchemeName {
    pub fn name(self) -> &'static str {
        match self {
            SchemeName::L1rbp => "l1rbp",
            SchemeName::L1mfrbp => "l1mfrbp",
            SchemeName::Planning => "planning",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// How level-0 futures are produced while training.
    pub scheme: SchemeName,
    pub model: CspConfig,
    pub train: TrainConfig,
    pub sensor: SensorConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            scheme: SchemeName::default(),
            model: CspConfig::desk(synth.sample_rate),
            train: TrainConfig::default(),
            sensor: SensorConfig::default(),
            synth,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.model.validate()?;
        config.synth.validate()?;
        config.sensor.validate()?;
        Ok(config)
    }

    pub fn training_scheme(&self) -> TrainingScheme {
        match self.scheme {
            SchemeName::L1rbp => TrainingScheme::L1Rbp,
            SchemeName::L1mfrbp => TrainingScheme::L1Mfrbp { sensor: self.sensor },
            SchemeName::Planning => TrainingScheme::Planning { sensor: self.sensor },
        }
    }

    /// Canonical serialization; comments and key order in the source file do not matter.
    pub fn canonical(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
