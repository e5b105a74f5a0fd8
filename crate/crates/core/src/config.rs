//! Experiment configuration: one JSON file describing data, network,
//! optimization, seeds and output location. Command-line flags override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ForgeConfig;
use crate::error::{Error, Result};
use crate::stage1::NetworkConfig;
use crate::urn::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Datasets whose train splits are merged for training.
    pub dataset_roots: Vec<PathBuf>,
    /// Datasets whose test splits are evaluated; empty means
    /// `dataset_roots`.
    pub test_roots: Vec<PathBuf>,
    /// Directory of pristine source images for `gen-data`; procedural
    /// images are used when absent.
    pub sources: Option<PathBuf>,
    pub data: ForgeConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Fraction of the training split held out for checkpoint selection.
    /// With 0 the best checkpoint is chosen on training loss.
    pub val_fraction: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Attack slugs for `attack` when no spec is given on the command line.
    pub attacks: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale setup: 64×64 procedural data, small channels, lr 1e-3.
    pub fn toy() -> Self {
        Self {
            dataset_roots: vec![PathBuf::from("data/toy")],
            test_roots: Vec::new(),
            sources: None,
            data: ForgeConfig::default(),
            network: NetworkConfig::toy(),
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 4,
                epochs_stage1: 150,
                epochs_stage2: 150,
                ..TrainConfig::default()
            },
            val_fraction: 0.0,
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            attacks: ["blur-k7", "noise-s10", "jpeg-q50", "recapture", "inpaint-telea-r3"].map(String::from).to_vec(),
        }
    }

    /// Full-size setup: 256×256 input, 200 splices per approach, lr 1e-4,
    /// batch 8, 200 epochs per stage.
    pub fn full_scale() -> Self {
        Self {
            dataset_roots: vec![PathBuf::from("data/scisp-h")],
            data: ForgeConfig {
                per_approach: 200,
                size: (256, 256),
                ..ForgeConfig::default()
            },
            network: NetworkConfig::full_scale(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/full"),
            ..Self::toy()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.dataset_roots.is_empty() {
            return Err(Error::InvalidArgument("at least one dataset root is required".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn eval_roots(&self) -> &[PathBuf] {
        if self.test_roots.is_empty() {
            &self.dataset_roots
        } else {
            &self.test_roots
        }
    }
}
