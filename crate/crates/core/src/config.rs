//! The single JSON configuration document. Every section and field is
//! optional; missing values take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::CacheOptions;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, EvalContext};
use crate::expert::{fingerprint_bytes, ExpertConfig};
use crate::perception::PerceptionConfig;
use crate::policy::TrainConfig;
use crate::runtime::RuntimeConfig;
use crate::sim::SimConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub expert: ExpertConfig,
    pub perception: PerceptionConfig,
    pub train: TrainConfig,
    pub runtime: RuntimeConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.perception.validate()?;
        self.train.validate()?;
        self.runtime.validate()?;
        self.eval.validate()
    }

    /// SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn cache_options(&self) -> CacheOptions {
        CacheOptions {
            k: self.train.chunk_len,
            chunk_stride: self.runtime.stride(),
            augment_occlusion_p: self.train.augment_occlusion_p,
            augment_slot_permutation: self.train.augment_slot_permutation,
            perception: self.perception.clone(),
        }
    }

    pub fn eval_context(&self) -> EvalContext {
        EvalContext {
            sim: self.sim.clone(),
            perception: self.perception.clone(),
            runtime: self.runtime.clone(),
            prompt_jitter: self.expert.prompt_jitter,
        }
    }
}
