//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use speechfix_core::correction::CorrectionConfig;
use speechfix_core::dataset::SplitRatios;
use speechfix_core::sim::SimConfig;
use thiserror::Error;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SPEECHFIX_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where an adapter role is served from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterSpec {
    #[default]
    Sim,
    /// A child process speaking the line protocol.
    Process {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub evaluator: AdapterSpec,
    pub editor: AdapterSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub timestep: u32,
    pub horizon: u32,
    pub hop_s: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            timestep: 0,
            horizon: 1000,
            hop_s: speechfix_core::DEFAULT_HOP_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 20.0,
            val: 1.0,
            test: 1.0,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> Result<SplitRatios, ConfigError> {
        SplitRatios::from_weights(self.train, self.val, self.test)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub correction: CorrectionConfig,
    pub adapters: AdapterConfig,
    pub dpo: DpoConfig,
    pub split: SplitConfig,
    /// Worker threads for per-sample parallelism; 0 picks the core count.
    /// Never serialized: it cannot change any output.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            correction: CorrectionConfig::default(),
            adapters: AdapterConfig::default(),
            dpo: DpoConfig::default(),
            split: SplitConfig::default(),
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Reads `path`, or the file named by [`CONFIG_ENV`], or falls back to
    /// defaults when neither is given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Read {
                    path: p.clone(),
                    source,
                })?;
                Self::from_toml(&text, &p)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.correction
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.split.ratios()?;
        let d = &self.dpo;
        if !(d.beta.is_finite() && d.beta > 0.0) {
            return Err(ConfigError::Invalid("dpo.beta must be positive".into()));
        }
        if d.timestep >= d.horizon {
            return Err(ConfigError::Invalid("dpo.timestep must be below dpo.horizon".into()));
        }
        if !(d.hop_s.is_finite() && d.hop_s > 0.0) {
            return Err(ConfigError::Invalid("dpo.hop_s must be positive".into()));
        }
        for spec in [&self.adapters.evaluator, &self.adapters.editor] {
            if let AdapterSpec::Process { command, .. } = spec {
                if command.is_empty() {
                    return Err(ConfigError::Invalid("process adapter needs a command".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
