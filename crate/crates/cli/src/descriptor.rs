//! Backbone descriptors and checkpoint files.
//!
//! A descriptor is a small TOML file naming either the seeded toy backbone
//! or a checkpoint: a JSON file holding a toy-architecture configuration,
//! its weights and its codec, pinned by SHA-256. Relative checkpoint paths
//! resolve against the cache directory.

use std::path::{Path, PathBuf};

use attndistill_core::{Backbone, Codec, DiffusionSchedule, LayerSelector, ToyConfig, ToyUnet};
use attndistill_core::backbone::ToyWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CACHE_ENV: &str = "ATTNDISTILL_CACHE";
pub const CHECKPOINT_FORMAT: &str = "attndistill-toy-v1";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("checkpoint {path} has format `{found}`, expected `{CHECKPOINT_FORMAT}`")]
    Format { path: PathBuf, found: String },
    #[error("checkpoint {path} is not in the cache and no cache directory is set ({CACHE_ENV})")]
    NoCache { path: PathBuf },
    #[error("invalid backbone: {0}")]
    Invalid(#[from] attndistill_core::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackboneDescriptor {
    Toy {
        #[serde(default)]
        config: ToyConfig,
        #[serde(default)]
        layers: Option<LayerSelector>,
    },
    Pretrained {
        checkpoint: PathBuf,
        sha256: String,
        #[serde(default)]
        layers: Option<LayerSelector>,
    },
}

impl Default for BackboneDescriptor {
    fn default() -> Self {
        BackboneDescriptor::Toy {
            config: ToyConfig::default(),
            layers: None,
        }
    }
}

/// Serialized backbone: architecture, weights and codec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ToyConfig,
    pub weights: ToyWeights,
    pub codec: Codec,
}

impl Checkpoint {
    pub fn from_toy(config: ToyConfig) -> Result<Self, BackboneError> {
        let unet = ToyUnet::new(config.clone())?;
        let codec = Codec::toy(config.seed, config.codec_factor, config.latent_channels)?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            config,
            weights: unet.weights().clone(),
            codec,
        })
    }

    /// Writes the checkpoint and returns its SHA-256 in hex.
    pub fn save(&self, path: &Path) -> Result<String, BackboneError> {
        let bytes = serde_json::to_vec(self).map_err(|e| BackboneError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, &bytes).map_err(|source| BackboneError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Cache directory from the environment, if set.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn read(path: &Path) -> Result<Vec<u8>, BackboneError> {
    std::fs::read(path).map_err(|source| BackboneError::Read {
        path: path.to_path_buf(),
        source,
    })
}

impl BackboneDescriptor {
    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let text = String::from_utf8_lossy(&read(path)?).into_owned();
        toml::from_str(&text).map_err(|e| BackboneError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackboneDescriptor::Toy { .. } => "toy",
            BackboneDescriptor::Pretrained { .. } => "pretrained",
        }
    }

    pub fn layers(&self) -> Option<&LayerSelector> {
        match self {
            BackboneDescriptor::Toy { layers, .. } | BackboneDescriptor::Pretrained { layers, .. } => layers.as_ref(),
        }
    }

    /// Reads the checkpoint this descriptor names, or builds the toy one.
    /// `base_dir` resolves relative checkpoint paths when `cache` is unset.
    /// The second value is the verified file checksum.
    pub fn checkpoint(&self, cache: Option<&Path>, base_dir: Option<&Path>) -> Result<(Checkpoint, Option<String>), BackboneError> {
        match self {
            BackboneDescriptor::Toy { config, .. } => Ok((Checkpoint::from_toy(config.clone())?, None)),
            BackboneDescriptor::Pretrained { checkpoint, sha256, .. } => {
                let path = if checkpoint.is_absolute() {
                    checkpoint.clone()
                } else if let Some(dir) = cache.or(base_dir) {
                    dir.join(checkpoint)
                } else {
                    return Err(BackboneError::NoCache {
                        path: checkpoint.clone(),
                    });
                };
                Ok((read_checkpoint(&path, sha256)?, Some(sha256.trim().to_lowercase())))
            }
        }
    }

    pub fn build(&self, cache: Option<&Path>, base_dir: Option<&Path>) -> Result<Backbone, BackboneError> {
        self.checkpoint(cache, base_dir)?.0.into_backbone(self.layers())
    }
}

impl Checkpoint {
    pub fn into_backbone(self, layers: Option<&LayerSelector>) -> Result<Backbone, BackboneError> {
        let default = LayerSelector::Last(self.config.layers.min(6));
        let schedule = DiffusionSchedule::scaled_linear(self.config.t_max)?;
        let unet = ToyUnet::from_parts(self.config, self.weights)?;
        let mut backbone = Backbone::new(Box::new(unet), self.codec, schedule)?;
        backbone.register_taps(layers.unwrap_or(&default))?;
        Ok(backbone)
    }
}

/// Reads a checkpoint after verifying its SHA-256.
pub fn read_checkpoint(path: &Path, sha256: &str) -> Result<Checkpoint, BackboneError> {
    let bytes = read(path)?;
    let found = hex::encode(Sha256::digest(&bytes));
    if !found.eq_ignore_ascii_case(sha256.trim()) {
        return Err(BackboneError::Checksum {
            path: path.to_path_buf(),
            expected: sha256.to_string(),
            found,
        });
    }
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| BackboneError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(BackboneError::Format {
            path: path.to_path_buf(),
            found: ckpt.format,
        });
    }
    Ok(ckpt)
}
