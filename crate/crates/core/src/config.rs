//! One TOML file describing a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::concept::ConceptModelConfig;
use crate::error::{Error, Result};
use crate::inference::{DEFAULT_TAU_STOP, DEFAULT_T_MAX};
use crate::text::DEFAULT_SENTINEL;
use crate::training::{Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training corpus file; the synthetic generator is used when absent.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub synthetic_train_docs: usize,
    pub synthetic_val_docs: usize,
    /// Seed of the synthetic validation corpus (training uses the run seed).
    pub synthetic_val_seed: u64,
    pub max_vocab: usize,
    pub sentinel: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            synthetic_train_docs: 500,
            synthetic_val_docs: 100,
            synthetic_val_seed: 1_000_003,
            max_vocab: 4096,
            sentinel: DEFAULT_SENTINEL.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub tau_stop: f64,
    pub t_max: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            tau_stop: DEFAULT_TAU_STOP,
            t_max: DEFAULT_T_MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub objective: Objective,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub model: ConceptModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objective: Objective::CeSonar,
            out_dir: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            model: ConceptModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
