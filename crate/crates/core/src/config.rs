//! The declarative run configuration: one JSON document drives dataset
//! generation, training, calibration, and evaluation. Its SHA-256
//! fingerprint is embedded in every artifact so stages cannot be mixed
//! across incompatible configs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::loss::{PixelSetPolicy, ScoreOptions};
use crate::mae::{MAEConfig, MaeError};
use crate::sketch::{DatasetConfig, SketchError};
use crate::train::TrainConfig;

/// Decoupled weight-decay coefficient applied when decay is enabled.
pub const WEIGHT_DECAY: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mae(#[from] MaeError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

fn invalid(detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(detail.into())
}

/// Training-stage settings as they appear in the config document.
/// `p_mask` is deliberately absent: it lives in the model section and is
/// merged in by [`RunConfig::train_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay_enabled: bool,
    pub augmentation_enabled: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
}

/// Scoring-stage settings: how per-sample losses are turned into scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    /// Independent mask draws averaged per sample.
    #[serde(rename = "K")]
    pub k: usize,
    pub white_threshold: f64,
    pub pixel_set: PixelSetPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: MAEConfig,
    pub train: TrainSection,
    pub scoring: ScoringSection,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Desk-scale starting point: 64+64 sketches at 56×56, the small
    /// transformer, and a budget that overfits within minutes.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            model: MAEConfig::desk(),
            // Batch 1 maximizes optimizer steps per epoch and the small
            // constant learning rate lets the weights settle instead of
            // rattling around the memorization floor; both matter for
            // reaching high train detection within the epoch budget.
            train: TrainSection {
                epochs: 2000,
                batch_size: 1,
                learning_rate: 5e-4,
                weight_decay_enabled: false,
                augmentation_enabled: false,
                seed: 0,
                checkpoint_every: 500,
            },
            scoring: ScoringSection {
                k: crate::loss::DEFAULT_SCORE_REPEATS,
                white_threshold: crate::loss::WHITE_THRESHOLD,
                pixel_set: PixelSetPolicy::AllDrawing,
                seed: 0xA11CE,
            },
            output_dir: output_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset.validate()?;
        self.model.validate()?;
        if self.dataset.width != self.model.image_width
            || self.dataset.height != self.model.image_height
        {
            return Err(invalid(format!(
                "dataset renders {}x{} but the model expects {}x{}",
                self.dataset.width,
                self.dataset.height,
                self.model.image_width,
                self.model.image_height
            )));
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size must be >= 1"));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(invalid(format!("train.learning_rate {} must be positive", t.learning_rate)));
        }
        if t.checkpoint_every == 0 {
            return Err(invalid("train.checkpoint_every must be >= 1"));
        }
        let s = &self.scoring;
        if s.k == 0 {
            return Err(invalid("scoring.K must be >= 1"));
        }
        if !(s.white_threshold.is_finite() && s.white_threshold > 0.0 && s.white_threshold <= 1.0)
        {
            return Err(invalid(format!(
                "scoring.white_threshold {} must lie in (0, 1]",
                s.white_threshold
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonicalized document (keys sorted, compact).
    /// Stable across field reordering and whitespace in the source file.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(value.to_string().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Runtime training settings with `p_mask`, `white_threshold`, and
    /// the pixel-set policy merged in from their home sections.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay_enabled: t.weight_decay_enabled,
            augmentation_enabled: t.augmentation_enabled,
            p_mask: self.model.p_mask,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            white_threshold: self.scoring.white_threshold,
            pixel_set: self.scoring.pixel_set,
        }
    }

    /// Scoring knobs for calibration and evaluation (identical protocol).
    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            p_mask: self.model.p_mask,
            repeats: self.scoring.k,
            white_threshold: self.scoring.white_threshold,
            pixel_set: self.scoring.pixel_set,
        }
    }

    /// Effective decay coefficient for the optimizer.
    pub fn weight_decay(&self) -> f64 {
        if self.train.weight_decay_enabled { WEIGHT_DECAY } else { 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_validates_and_round_trips() {
        let config = RunConfig::desk("/tmp/run");
        config.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded, config);
        assert_eq!(loaded.fingerprint(), config.fingerprint());
    }

    #[test]
    fn fingerprint_ignores_formatting_but_not_values() {
        let config = RunConfig::desk("/tmp/run");
        let dir = tempfile::tempdir().unwrap();

        // Same document, different key order and whitespace.
        let value = serde_json::to_value(&config).unwrap();
        let mut obj = value.as_object().unwrap().clone();
        let dataset = obj.remove("dataset").unwrap();
        obj.insert("dataset".into(), dataset);
        let reordered = serde_json::Value::Object(obj);
        let path = dir.path().join("reordered.json");
        std::fs::write(&path, serde_json::to_string_pretty(&reordered).unwrap()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.fingerprint(), config.fingerprint());
        assert_eq!(config.fingerprint().len(), 64);

        let mut changed = config.clone();
        changed.model.p_mask = 0.5;
        assert_ne!(changed.fingerprint(), config.fingerprint());

        let mut seeded = config.clone();
        seeded.train.seed = 1;
        assert_ne!(seeded.fingerprint(), config.fingerprint());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let config = RunConfig::desk("/tmp/run");
        let mut value = serde_json::to_value(&config).unwrap();
        value["train"]["learning_rte"] = serde_json::json!(0.1);
        let text = value.to_string();
        let err = serde_json::from_str::<RunConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
    }

    #[test]
    fn validation_catches_cross_section_and_range_errors() {
        let mut config = RunConfig::desk("/tmp/run");
        config.dataset.width = 64;
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));

        let mut config = RunConfig::desk("/tmp/run");
        config.train.learning_rate = 0.0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::desk("/tmp/run");
        config.train.epochs = 0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::desk("/tmp/run");
        config.scoring.k = 0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::desk("/tmp/run");
        config.scoring.white_threshold = 1.5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn weight_decay_is_exactly_pinned() {
        let mut config = RunConfig::desk("/tmp/run");
        assert_eq!(config.weight_decay(), 0.0);
        config.train.weight_decay_enabled = true;
        assert_eq!(config.weight_decay(), 0.05);
    }

    #[test]
    fn train_config_merges_cross_section_fields() {
        let mut config = RunConfig::desk("/tmp/run");
        config.model.p_mask = 0.85;
        config.scoring.white_threshold = 0.99;
        let tc = config.train_config();
        assert_eq!(tc.p_mask, 0.85);
        assert_eq!(tc.white_threshold, 0.99);
        assert_eq!(tc.epochs, config.train.epochs);
        let so = config.score_options();
        assert_eq!(so.p_mask, 0.85);
        assert_eq!(so.repeats, config.scoring.k);
    }
}
