//! Declarative run configuration, read from TOML. Every section is
//! optional and falls back to defaults; command-line flags override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::HeadTrainConfig;
use crate::scoring::{ProbabilitySupport, ScoringMode};
use crate::synth::SyntheticFamilySpec;
use crate::ttt::{GridSpec, PretrainConfig, TttConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub mode: ScoringMode,
    pub support: ProbabilitySupport,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub msa: Option<PathBuf>,
    pub assays: Vec<PathBuf>,
    pub families: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ttt: TttConfig,
    pub scoring: ScoringConfig,
    pub paths: PathsConfig,
    pub synth: SyntheticFamilySpec,
    pub grid: GridSpec,
    pub pretrain: PretrainConfig,
    pub head: HeadTrainConfig,
    /// Worker threads for grid runs.
    pub jobs: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies a global seed to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.ttt.seed = seed;
        self.synth.seed = seed;
        self.pretrain.seed = seed;
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
