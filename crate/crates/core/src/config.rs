//! Versioned run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LogFormat, SynthConfig};
use crate::encoder::ModelConfig;
use crate::error::{bail, Error, Result};
use crate::mixer::SlideMode;
use crate::train::TrainSettings;

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Where interactions come from and how they are preprocessed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw interaction log; ignored when `synth` is set.
    pub raw: Option<PathBuf>,
    /// Inferred from the file extension when absent.
    pub format: Option<LogFormat>,
    pub min_timestamp: Option<i64>,
    pub skip_bad: bool,
    /// Minimum interactions per user and item.
    pub core: usize,
    pub synth: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { raw: None, format: None, min_timestamp: None, skip_bad: false, core: 5, synth: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Processed dataset cache file.
    pub cache: Option<PathBuf>,
    /// Checkpoints, logs, and reports of this run.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { cache: None, run_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub batch_size: usize,
    /// Uniform noise half-width added to every layer input.
    pub noise_epsilon: f64,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![5, 10], batch_size: 256, noise_epsilon: 0.0, noise_seed: 0 }
    }
}

/// Axes of a sweep; an empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub layers: Vec<usize>,
    pub max_len: Vec<usize>,
    pub hidden: Vec<usize>,
    pub mode: Vec<SlideMode>,
    pub gamma: Vec<f64>,
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            precision: Precision::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != RUN_CONFIG_VERSION {
            bail!(Config, "config version {} unsupported (expected {RUN_CONFIG_VERSION})", cfg.version);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Short digest of the serialized configuration. Output locations are
    /// left out, so moving a run directory keeps its hash.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { paths: PathsConfig::default(), ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Checks everything that does not depend on the dataset. The
    /// vocabulary size is filled in from the data before training.
    pub fn validate(&self) -> Result<()> {
        let probe = ModelConfig { vocab_size: self.model.vocab_size.max(2), ..self.model.clone() };
        probe.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!(Config, "evaluation K values must be positive");
        }
        if !(self.eval.noise_epsilon >= 0.0) {
            bail!(Config, "noise epsilon must be nonnegative");
        }
        if self.data.synth.is_none() && self.data.raw.is_none() {
            bail!(Config, "either data.raw or data.synth must be set");
        }
        Ok(())
    }
}
