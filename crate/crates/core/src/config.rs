//! Top-level run configuration read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::{FormationConfig, MppiConfig, PacConfig};
use crate::data::{DatagenConfig, TrainConfig};
use crate::error::Result;
use crate::nn::NetworkConfig;
use crate::policy::PolicyConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub network: NetworkConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, train: 0, eval: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub formation: FormationConfig,
    pub pac: PacConfig,
    pub mppi: MppiConfig,
    pub diffusion: DiffusionConfig,
    pub datagen: DatagenConfig,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        crate::controllers::FormationTracker::new(&self.formation)?;
        self.diffusion.network.validate()?;
        self.diffusion.policy.validate()?;
        Ok(())
    }
}
