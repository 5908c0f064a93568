//! Run configuration: a TOML file whose values any command-line flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use har_core::dataset::{Device, Sensor, SkipPolicy, SplitRatios};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub split: SplitRatios,
    pub train: TrainSection,
    pub forecast: ForecastSection,
    pub synthetic: SyntheticSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub raw_dir: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub device: Device,
    pub sensor: Sensor,
    pub drop_features: Vec<String>,
    pub skip_policy: SkipPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Overrides every architecture's own epoch budget when set.
    pub epochs: Option<usize>,
    pub stop_rule: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub context: usize,
    pub stride: usize,
    pub epochs: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    /// Simulated subjects, each performing every activity once.
    pub subjects: usize,
    pub samples_per_stream: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            split: SplitRatios::default(),
            train: TrainSection::default(),
            forecast: ForecastSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            raw_dir: PathBuf::from("raw"),
            work_dir: PathBuf::from("work"),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            device: Device::Watch,
            sensor: Sensor::Accel,
            drop_features: Vec::new(),
            skip_policy: SkipPolicy::Skip,
        }
    }
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            context: 20,
            stride: 1,
            epochs: 60,
            horizon: har_core::models::FORECAST_HORIZON,
        }
    }
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            subjects: 10,
            samples_per_stream: 3600,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.split.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let f = &self.forecast;
        if f.context == 0 || f.stride == 0 || f.epochs == 0 || f.horizon == 0 {
            return Err(CliError::Config("forecast context, stride, epochs and horizon must be positive".into()));
        }
        if self.synthetic.subjects == 0 || self.synthetic.samples_per_stream < har_core::dataset::WINDOW_LEN {
            return Err(CliError::Config("synthetic data needs at least one subject and one full window".into()));
        }
        if self.train.epochs == Some(0) {
            return Err(CliError::Config("train.epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }
}

/// Expands the root seed into an independent seed per named stage.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
