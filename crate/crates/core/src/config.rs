//! Declarative run configuration (TOML). Every command-line flag has a key
//! here; flags given on the command line win over file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::trainloop::{LossConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Class names in label-index order; defaults to the ten built-in classes.
    pub classes: Option<Vec<String>>,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub augment: AugmentConfig,
    pub predict: PredictSection,
    pub ensemble: EnsembleSection,
    pub eval: EvalSection,
    pub augment_preview: PreviewSection,
    pub sample_check: SampleCheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub arch: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub improvement_tolerance: f64,
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            train_manifest: None,
            val_manifest: None,
            arch: None,
            out_dir: None,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            improvement_tolerance: d.improvement_tolerance,
            record_wall_time: d.record_wall_time,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub ckpt: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub preds: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub preds: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewSection {
    pub input: Option<PathBuf>,
    pub index: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCheckSection {
    pub manifest: Option<PathBuf>,
    pub draws: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        match &self.classes {
            Some(names) => ClassCatalog::new(names.iter().cloned()),
            None => Ok(ClassCatalog::default()),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            improvement_tolerance: self.train.improvement_tolerance,
            seed: self.seed.unwrap_or(0),
            optimizer: self.optim,
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            record_wall_time: self.train.record_wall_time,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
