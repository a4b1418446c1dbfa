use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tsdistill::config::content_hash;
use tsdistill::evaluate::{FinetuneConfig, FrequencyTaskConfig, ProbeConfig};
use tsdistill::synth::SynthConfig;
use tsdistill::trainer::TrainConfig;

/// Every tunable constant of a run. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub frequency_task: FrequencyTaskConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            anyhow::anyhow!(
                "{}: invalid config at `{field}`: {}",
                path.display(),
                e.into_inner()
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(content_hash(self)?)
    }
}
