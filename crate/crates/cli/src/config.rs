use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use mrt::distill::DistillConfig;
use mrt::model::ModelConfig;
use mrt::sampler::SampleConfig;
use mrt::synth::GenParams;
use mrt::train::{check_channels, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub gen: GenParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { count: 16, seed: 0, gen: GenParams::default() }
    }
}

/// What produced an output directory; informational when read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invocation {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
}

/// Every section has defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Invocation>,
}

impl RunConfig {
    /// Read a TOML document, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::input)?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        }?;
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        check_channels(&self.model, self.train.patch).map_err(CliError::from)?;
        self.sample.validate().map_err(CliError::from)?;
        self.distill.validate().map_err(CliError::from)?;
        self.data.gen.validate().map_err(CliError::from)?;
        Ok(())
    }
}
