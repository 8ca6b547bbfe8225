//! Run configuration: every module's parameters in one TOML document.
//!
//! Missing keys take their defaults; unknown keys are rejected with the
//! offending path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::dbscan::ClusterParams;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::{NoiseParams, SceneParams, TargetStyle};
use crate::trainer::{FoundationConfig, ScheduleConfig};

/// Sizes and directory names of the generated benchmark. Directories are
/// relative to the CLI `--out` root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_count: usize,
    pub synthesized_count: usize,
    pub pool_size: usize,
    pub target_train_count: usize,
    pub target_test_count: usize,
    pub source_dir: String,
    pub pool_dir: String,
    pub synth_dir: String,
    pub target_train_dir: String,
    pub target_test_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_count: 254,
            synthesized_count: 254,
            pool_size: 64,
            target_train_count: 200,
            target_test_count: 50,
            source_dir: "source".into(),
            pool_dir: "pool".into(),
            synth_dir: "synth".into(),
            target_train_dir: "target_train".into(),
            target_test_dir: "target_test".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub scene: SceneParams,
    pub target: TargetStyle,
    pub noise: NoiseParams,
    pub cluster: ClusterParams,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub foundation: FoundationConfig,
    pub augment: AugmentationPolicy,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.cluster.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.foundation.validate()?;
        self.augment.validate()?;
        if (self.scene.height, self.scene.width) != self.model.image_size {
            return Err(Error::Config(format!(
                "scene size {}x{} differs from model.image_size {:?}",
                self.scene.height, self.scene.width, self.model.image_size
            )));
        }
        if self.data.source_count == 0 || self.data.synthesized_count == 0 || self.data.pool_size == 0 {
            return Err(Error::Config("data counts must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.schedule.learning_rate, 1e-4);
        assert_eq!(cfg.schedule.batch_size_train, 2);
        assert_eq!(cfg.schedule.batch_size_eval, 16);
        assert_eq!(cfg.schedule.warmup_epochs, 3);
        assert_eq!(cfg.loss.tau, 0.3);
        assert_eq!(cfg.loss.focal_exponent, 2.0);
        assert_eq!(cfg.data.synthesized_count, 254);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[schedule]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn round_trip_is_stable() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.augment.intensity_jitter = 0.15;
        cfg.cluster.keep_top_k = Some(2);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[schedule]\nlearning_rate = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nimage_size = [100, 100]\n[scene]\nheight = 100\nwidth = 100\n").is_err());
    }
}
