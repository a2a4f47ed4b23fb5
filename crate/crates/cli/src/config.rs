//! Experiment configuration: one TOML file describing a whole run.
//!
//! Every section is optional and falls back to the desk-scale defaults;
//! unknown keys anywhere are rejected. All randomness derives from the
//! top-level `seed` through named substreams.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use mar3d_core::artifact_sim::ProjectionGeometry;
use mar3d_core::dataset::{DatasetConfig, PhysicsSettings};
use mar3d_core::metrics::SsimParams;
use mar3d_core::phantoms::PhantomSpec;
use mar3d_core::seeds::substream_seed;
use mar3d_core::translate::{Direction, TranslateConfig, UpdateMode};
use mar3d_model::losses::{LossWeights, Variant};
use mar3d_model::nets::ModelConfig;
use mar3d_model::optim::AdamConfig;
use mar3d_model::training::TrainConfig;

/// Environment variable that replaces `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "MAR3D_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config schema violation: {0}")]
    Schema(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCounts {
    /// Clean (Y) training volumes.
    pub n_clean: usize,
    /// Artifact-affected (X) training volumes.
    pub n_artifact: usize,
    pub n_test_phantoms: usize,
    pub test_m_values: Vec<usize>,
    pub perturb: bool,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            n_clean: d.n_clean,
            n_artifact: d.n_artifact,
            n_test_phantoms: d.n_test_phantoms,
            test_m_values: d.test_m_values,
            perturb: d.perturb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub crop: Option<usize>,
    pub lr_decay: bool,
    pub d_steps: usize,
    pub checkpoint_interval: usize,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variant: t.variant,
            batch_size: t.batch_size,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            crop: t.crop,
            lr_decay: t.lr_decay,
            d_steps: t.d_steps,
            checkpoint_interval: t.checkpoint_interval,
            optimizer: t.optimizer,
            weights: t.weights,
            model: t.model,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateSection {
    pub mode: UpdateMode,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Slice indices rendered as PNGs.
    pub figure_slices: Vec<usize>,
    /// Figures are written for the first this-many test phantoms.
    pub figure_phantoms: usize,
    pub ssim: SsimParams,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            figure_slices: vec![6],
            figure_phantoms: 1,
            ssim: SsimParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    /// Phantom template; its own `seed` is replaced per phantom.
    #[serde(default)]
    pub phantoms: PhantomSpec,
    #[serde(default)]
    pub physics: PhysicsSettings,
    #[serde(default)]
    pub geometry: ProjectionGeometry,
    #[serde(default)]
    pub dataset: DatasetCounts,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub translate: TranslateSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, applying the output-root
    /// environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: substream_seed(self.seed, "dataset"),
            n_clean: self.dataset.n_clean,
            n_artifact: self.dataset.n_artifact,
            n_test_phantoms: self.dataset.n_test_phantoms,
            test_m_values: self.dataset.test_m_values.clone(),
            phantom: self.phantoms.clone(),
            perturb: self.dataset.perturb,
            physics: self.physics.clone(),
            geometry: self.geometry.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            variant: t.variant,
            model: t.model.clone(),
            batch_size: t.batch_size,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            crop: t.crop,
            optimizer: t.optimizer.clone(),
            lr_decay: t.lr_decay,
            d_steps: t.d_steps,
            seed: substream_seed(self.seed, "training"),
            weights: t.weights.clone(),
            checkpoint_interval: t.checkpoint_interval,
        }
    }

    pub fn translate_config(&self) -> TranslateConfig {
        TranslateConfig {
            n_slices: self.train.model.n_slices,
            mode: self.translate.mode,
            direction: self.translate.direction,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.output_root.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("output_root must not be empty".into()));
        }
        self.dataset_config().validate().map_err(|e| invalid(&e))?;
        let train = self.train_config();
        train.validate().map_err(|e| invalid(&e))?;
        let (h, w) = self.phantoms.image_size;
        if let Some(c) = train.crop {
            if c > h || c > w {
                return Err(ConfigError::Invalid(format!("crop {c} exceeds the image size {h}x{w}")));
            }
        }
        let n = train.model.n_slices;
        if n > self.phantoms.n_slices {
            return Err(ConfigError::Invalid(format!(
                "window of {n} slices exceeds the {} slices per volume",
                self.phantoms.n_slices
            )));
        }
        if let Some(&z) = self
            .metrics
            .figure_slices
            .iter()
            .find(|&&z| z >= self.phantoms.n_slices)
        {
            return Err(ConfigError::Invalid(format!(
                "figure slice {z} outside 0..{}",
                self.phantoms.n_slices
            )));
        }
        if self.metrics.ssim.window == 0 || self.metrics.ssim.window.is_multiple_of(2) {
            return Err(ConfigError::Invalid("SSIM window must be odd".into()));
        }
        Ok(())
    }
}
