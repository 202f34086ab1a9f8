//! Run configuration, stored as TOML beside every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Codec;
use crate::data;
use crate::flow::{FlowConfig, TrainConfig, TrainSet};
use crate::model::{ArchConfig, MlpConfig};
use crate::optim::AdamConfig;
use crate::prompt::Vocabulary;
use crate::tensor::Tensor;
use crate::uvit::UViTConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Shapes { n: usize, seed: u64 },
    TwoMoons { n: usize, noise_sd: f32, seed: u64 },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Shapes { n: 2000, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub codec: Codec,
    pub model: ArchConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

/// The shapes model used throughout the tests: 16x16 images, 4x4 patches.
pub fn desk_uvit() -> UViTConfig {
    UViTConfig {
        image_size: 16,
        channels: 1,
        patch_size: 4,
        embed_dim: 64,
        depth: 4,
        heads: 4,
        prompt_length: 8,
        vocab_size: 64,
        mlp_ratio: 4,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/shapes"),
            dataset: DatasetSpec::default(),
            codec: Codec::Identity,
            model: ArchConfig::Uvit(desk_uvit()),
            flow: FlowConfig::default(),
            train: TrainConfig {
                steps: 2000,
                batch_size: 32,
                seed: 0,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn two_moons() -> Self {
        Self {
            output_dir: PathBuf::from("runs/moons"),
            dataset: DatasetSpec::TwoMoons {
                n: 8000,
                noise_sd: 0.05,
                seed: 1,
            },
            model: ArchConfig::Mlp(MlpConfig::default()),
            train: TrainConfig {
                steps: 30_000,
                batch_size: 512,
                seed: 0,
                adam: AdamConfig {
                    lr: 2e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.flow.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match (&self.model, &self.dataset) {
            (ArchConfig::Uvit(u), DatasetSpec::Shapes { n, .. }) => {
                u.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if u.image_size != data::IMAGE_SIZE || u.channels != 1 {
                    return invalid(format!(
                        "shapes images are 1x{0}x{0}, model expects {1}x{2}x{2}",
                        data::IMAGE_SIZE,
                        u.channels,
                        u.image_size
                    ));
                }
                if self.codec != Codec::Identity {
                    return invalid("only the identity codec is supported for training".into());
                }
                if *n == 0 {
                    return invalid("dataset is empty".into());
                }
            }
            (ArchConfig::Mlp(m), DatasetSpec::TwoMoons { n, .. }) => {
                if m.dim != 2 {
                    return invalid(format!("two moons is 2-D, model dim is {}", m.dim));
                }
                if *n == 0 {
                    return invalid("dataset is empty".into());
                }
            }
            _ => return invalid("model kind does not match dataset kind".into()),
        }
        if self.train.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        if !(self.train.adam.lr > 0.0) {
            return invalid("learning rate must be positive".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Option<Vocabulary> {
        match &self.model {
            ArchConfig::Uvit(u) => Vocabulary::standard(u.vocab_size).ok(),
            ArchConfig::Mlp(_) => None,
        }
    }

    /// Materializes the training set described by `dataset`.
    pub fn train_set(&self) -> Result<TrainSet, ConfigError> {
        match (&self.dataset, &self.model) {
            (DatasetSpec::Shapes { n, seed }, ArchConfig::Uvit(u)) => {
                let samples = data::gen_shapes(*n, *seed);
                shapes_train_set(&samples, u.prompt_length, &self.vocabulary().expect("uvit vocabulary"))
            }
            (DatasetSpec::TwoMoons { n, noise_sd, seed }, _) => Ok(TrainSet {
                latents: data::two_moons(*n, *noise_sd, *seed),
                prompts: Vec::new(),
            }),
            _ => Err(ConfigError::Invalid("model kind does not match dataset kind".into())),
        }
    }
}

pub fn shapes_train_set(samples: &[data::ShapeSample], prompt_len: usize, vocab: &Vocabulary) -> Result<TrainSet, ConfigError> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let prompts = samples
        .iter()
        .map(|s| vocab.tokenize(&s.caption, prompt_len))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(TrainSet {
        latents: Tensor::stack(&images).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for c in [RunConfig::default(), RunConfig::two_moons()] {
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_toml("[train]\nsteps = 5\n").unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn mismatched_model_rejected() {
        let mut c = RunConfig::default();
        c.model = ArchConfig::Mlp(MlpConfig::default());
        assert!(c.validate().is_err());
    }
}
