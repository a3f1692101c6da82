use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, StoreError};
use crate::training::TrainingConfig;

/// Top-level experiment description consumed by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub distortion_grid: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub watermark_bits: usize,
}

fn default_k() -> usize {
    30
}

impl ExperimentConfig {
    /// Loads the JSON document and checks that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        for p in self.data_dir.iter().chain(self.distortion_grid.iter()) {
            if !p.exists() {
                return Err(StoreError::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.watermark_bits == 0 {
            return Err(StoreError::Config("watermark_bits must be positive".into()));
        }
        self.training.validate().map_err(|e| StoreError::Config(e.to_string()))
    }
}
