//! Run configuration: sampler settings plus output and dump switches.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sandbox::denoiser::DenoiserSpec;
use crate::sandbox::sampler::SamplerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpToggles {
    pub frames: bool,
    pub masks: bool,
    pub attention: bool,
    pub latent: bool,
    pub embeddings: bool,
}

impl Default for DumpToggles {
    fn default() -> Self {
        Self {
            frames: true,
            masks: true,
            attention: true,
            latent: true,
            embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserSpec,
    /// Trained weights; the seeded initialization of `denoiser` when absent.
    pub weights: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub dump: DumpToggles,
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys. The disambiguation horizon follows
    /// `steps` unless given explicitly.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::InvalidConfig(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("run config must be a JSON object".into()))?;
        let known = serde_json::to_value(RunConfig::default())?;
        let known = known.as_object().expect("struct serializes to an object");
        if let Some(key) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::InvalidConfig(format!("unknown key {key:?}")));
        }
        let explicit_horizon = obj
            .get("sad")
            .and_then(|s| s.as_object())
            .is_some_and(|s| s.contains_key("total_steps"));
        let mut config: RunConfig = serde_path_to_error::deserialize(&value)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", e.path(), e.inner())))?;
        if !explicit_horizon {
            config.sampler.sad.total_steps = config.sampler.steps;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.denoiser.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
