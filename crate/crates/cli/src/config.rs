//! TOML run configuration. Every field has a default; unknown keys are rejected.

use std::path::Path;

use bandlift::diffusion::{DiffusionTrainConfig, SamplerConfig};
use bandlift::latent_codec::CodecTrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for `simulate` and `train`; required by those commands
    /// either here or via `--seed`.
    pub seed: Option<u64>,
    pub sampler: SamplerConfig,
    pub codec: CodecTrainConfig,
    pub ldm: DiffusionTrainConfig,
    pub train: TrainLogging,
    pub vocoder: VocoderConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLogging {
    /// A loss row is written every this many steps.
    pub log_interval: usize,
    /// The checkpoint is rewritten every this many steps and at the end.
    pub checkpoint_interval: usize,
}

impl Default for TrainLogging {
    fn default() -> Self {
        Self {
            log_interval: 10,
            checkpoint_interval: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderConfig {
    pub griffin_lim_iters: usize,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self { griffin_lim_iters: 32 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
