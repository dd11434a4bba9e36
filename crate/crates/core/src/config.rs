//! Run configuration: one TOML file with a section per stage. Missing keys
//! take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::contract::ContractConfig;
use crate::envs::EnvName;
use crate::error::{Error, Result};
use crate::net::{Activation, TrainConfig, DEFAULT_HIDDEN_LAYERS, DEFAULT_HIDDEN_WIDTH, DEFAULT_STEP_EMBED_DIM};
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleKind;

/// The configuration shipped with the command-line tool.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("default_config.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Expert episodes to record.
    pub demos: usize,
    pub seed: u64,
    pub horizon: usize,
    pub obs_history: usize,
    /// Divide discrete action dimensions of the dataset by this factor;
    /// 1 leaves the data untouched.
    pub discrete_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: EnvName::Reach2dBimodal,
            demos: 300,
            seed: 1,
            horizon: 8,
            obs_history: 2,
            discrete_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub step_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            activation: Activation::Relu,
            step_embed_dim: DEFAULT_STEP_EMBED_DIM,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::SquaredCosine,
            steps: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub contract: ContractConfig,
}

impl RunConfig {
    /// Parses TOML text; errors carry the line and column of the problem.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        if e.demos == 0 || e.horizon == 0 || e.obs_history == 0 {
            return Err(Error::invalid("env.demos, env.horizon and env.obs_history must be positive"));
        }
        if !(e.discrete_scale > 0.0) || !e.discrete_scale.is_finite() {
            return Err(Error::invalid("env.discrete_scale must be positive"));
        }
        if self.model.hidden_width == 0 || self.model.step_embed_dim == 0 {
            return Err(Error::invalid("model.hidden_width and model.step_embed_dim must be positive"));
        }
        if self.schedule.steps < 2 {
            return Err(Error::invalid("schedule.steps must be at least 2"));
        }
        self.sampler.validate(self.schedule.steps)?;
        self.train.validate()?;
        self.bench.validate(self.env.horizon)?;
        self.contract.validate(self.schedule.steps)?;
        Ok(())
    }
}

/// Collapses a multi-line parser message onto one line, dropping the
/// source excerpt.
fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.contains('|'))
        .collect::<Vec<_>>()
        .join(": ")
}
