//! Experiment configuration: one TOML file describing the model, training
//! schedule, synthetic corpus and evaluation settings.
//!
//! Sections cross-validate — the image extent must survive the backbone's
//! downsampling, channel and class counts must agree between the model and
//! the corpus — so a bad combination fails at load time, not mid-run.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SceneSpec};
use crate::error::{Error, Result};
use crate::model::{DetectionModel, ModelConfig};
use crate::train::{EvalOptions, TrainConfig};

/// Corpus sizes and the scene recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training corpus size.
    pub train_images: usize,
    /// Held-out evaluation corpus size.
    pub eval_images: usize,
    /// Scene recipe shared by both corpora.
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            train_images: 64,
            eval_images: 16,
            scene: SceneSpec::default(),
        }
    }
}

/// A full experiment: seed, model, training, data and evaluation.
///
/// The master seed derives everything: the model is initialized from
/// `seed`, the training corpus uses `seed` and the evaluation corpus
/// `seed + 1`, so one number reproduces a whole run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed.
    pub seed: u64,
    /// Architecture and component toggles.
    pub model: ModelConfig,
    /// Optimization schedule.
    pub training: TrainConfig,
    /// Corpus recipe and sizes.
    pub data: DataConfig,
    /// Scoring settings.
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    /// Parses and validates a TOML experiment file.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::from_toml(&text)
    }

    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Serializes back to TOML.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.data.train_images == 0 || self.data.eval_images == 0 {
            return Err(Error::Config(
                "both corpora need at least one image".to_string(),
            ));
        }
        let total_stride = self.model.initial_stride << (self.model.pyramid_levels - 1);
        if !self.data.scene.image_size.is_multiple_of(total_stride) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the backbone's total stride {total_stride}",
                self.data.scene.image_size
            )));
        }
        if self.model.channels != self.data.scene.channels {
            return Err(Error::Config(format!(
                "model expects {} channels but scenes have {}",
                self.model.channels, self.data.scene.channels
            )));
        }
        if self.model.num_classes != self.data.scene.num_classes {
            return Err(Error::Config(format!(
                "model scores {} classes but scenes have {}",
                self.model.num_classes, self.data.scene.num_classes
            )));
        }
        Ok(())
    }

    /// Builds a fresh model seeded from the master seed.
    pub fn build_model(&self) -> Result<DetectionModel> {
        DetectionModel::init(self.model.clone(), &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    /// The training corpus.
    pub fn train_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.data.scene.clone(), self.seed, self.data.train_images)
    }

    /// The held-out evaluation corpus.
    pub fn eval_dataset(&self) -> Result<Dataset> {
        Dataset::new(
            self.data.scene.clone(),
            self.seed.wrapping_add(1),
            self.data.eval_images,
        )
    }
}
