//! Synthetic data, artifact oracle, metrics, run configuration and the
//! experiment drivers behind the command-line tool.

pub mod artifacts;
pub mod data;
pub mod experiments;
pub mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::phda::PhdaConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::TrainPlan;

pub use data::DataConfig;

/// Everything a run depends on. Missing sections and keys take defaults;
/// unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seed of training and sampling; overrides `train.seed`.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub phda: PhdaConfig,
    pub train: TrainPlan,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.phda.validate()?;
        self.plan().validate()?;
        self.sampler.validate()?;
        self.data.validate(&self.backbone)?;
        if self.sampler.window != self.backbone.frames {
            return Err(Error::Config(format!(
                "sampler.window {} must equal backbone.frames {}",
                self.sampler.window, self.backbone.frames
            )));
        }
        Ok(())
    }

    /// The training plan with the run seed applied.
    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// sha256 of the canonical serialization.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("serializable config");
        Sha256::digest(&canonical).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_digest() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let other = RunConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(other.digest(), cfg.digest());
    }

    #[test]
    fn partial_and_invalid_files() {
        let cfg =
            RunConfig::from_toml("seed = 4\n[backbone]\ndepth = 1\n[train]\nbatch_size = 2\n")
                .unwrap();
        assert_eq!(
            (cfg.seed, cfg.backbone.depth, cfg.backbone.d_model),
            (4, 1, 96)
        );
        assert_eq!(cfg.plan().seed, 4);
        assert!(matches!(
            RunConfig::from_toml("sed = 4"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[backbone]\ndepht = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[sampler]\nwindow = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("seed = \"x\""),
            Err(Error::Config(_))
        ));
    }
}
