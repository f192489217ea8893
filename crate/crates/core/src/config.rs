//! Run configuration: one TOML file with `dataset.*`, `model.*`, `train.*`,
//! `eval.*` and `caption.*` keys. Dotted keys and `[section]` tables are both
//! accepted; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::DEFAULT_CONTEXT_LENGTH;
use crate::datamodel::{DatasetSpec, Split};
use crate::encoder::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::evaluator::GalleryProtocol;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionConfig {
    pub context_length: usize,
    pub seed: u64,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            context_length: DEFAULT_CONTEXT_LENGTH,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: GalleryProtocol,
    pub probe_alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: GalleryProtocol::default(),
            probe_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub caption: CaptionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingDependency(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cross-section consistency on top of each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if (self.model.image_height, self.model.image_width) != (self.dataset.height, self.dataset.width) {
            return Err(Error::Config(format!(
                "model expects {}x{} images, dataset renders {}x{}",
                self.model.image_height, self.model.image_width, self.dataset.height, self.dataset.width
            )));
        }
        if self.model.context_length != self.caption.context_length {
            return Err(Error::Config("model and caption context lengths differ".into()));
        }
        if self.model.num_classes < self.dataset.train_identities {
            return Err(Error::Config(format!(
                "classifier has {} classes for {} train identities",
                self.model.num_classes, self.dataset.train_identities
            )));
        }
        if self.train.p > self.dataset.train_identities || self.train.k > self.dataset.images_per_modality {
            return Err(Error::Config(format!(
                "PK batch (P={}, K={}) does not fit the {} {}-split identities with {} images each",
                self.train.p,
                self.train.k,
                self.dataset.train_identities,
                Split::Train,
                self.dataset.images_per_modality
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn dotted_keys() {
        let c = RunConfig::from_toml("train.epochs = 5\ntrain.drop_epochs = [2, 3]\ntrain.loss.margin = 0.5\n").unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.loss.margin, 0.5);
        assert!(RunConfig::from_toml("train.epochz = 5\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
