//! Run configuration: every tunable of a training or evaluation run in one
//! TOML document. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::risk::RiskConfig;
use crate::sac::SacConfig;
use crate::sim::SimConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateCadence {
    /// `updates_per_step` gradient steps every `update_every` environment steps.
    PerStep,
    /// `updates_per_episode` gradient steps after each episode.
    PerEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub buffer_size: usize,
    /// SAC updates begin once this many transitions are stored.
    pub learning_starts: usize,
    pub cadence: UpdateCadence,
    pub update_every: usize,
    pub updates_per_step: usize,
    pub updates_per_episode: usize,
    /// Episodes during which the risk term of the reward is held at zero.
    pub risk_warmup_episodes: usize,
    pub risk_buffer_size: usize,
    /// Predictor gradient steps at the end of each episode.
    pub risk_updates_per_episode: usize,
    /// Stall-collision rule during training.
    pub stall_rule: bool,
    pub checkpoint_every: usize,
    /// Record the per-step phase trace.
    pub trace: bool,
    /// Held-out collision windows gathered after training for the probe.
    pub probe_windows: usize,
    pub probe_max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            steps_per_episode: 1000,
            buffer_size: 1_000_000,
            learning_starts: 5000,
            cadence: UpdateCadence::PerStep,
            update_every: 1,
            updates_per_step: 1,
            updates_per_episode: 1000,
            risk_warmup_episodes: 50,
            risk_buffer_size: 10_000,
            risk_updates_per_episode: 50,
            stall_rule: true,
            checkpoint_every: 50,
            trace: false,
            probe_windows: 32,
            probe_max_steps: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub probe_actions: Vec<f64>,
    /// Training seeds for each ablation variant.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1001, 1002, 1003],
            steps: 1000,
            probe_actions: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sim: SimConfig,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub risk: RiskConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            sim: SimConfig::default(),
            env: EnvConfig::default(),
            sac: SacConfig::default(),
            risk: RiskConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoRisk,
    NoBias,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoBias, Variant::NoRisk];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRisk => "no-risk",
            Variant::NoBias => "no-bias",
        }
    }
}

impl RunConfig {
    /// Full-size settings: 500 windows of 1000 steps, 256-wide SAC networks,
    /// 128-wide predictor.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Scaled-down settings that train in minutes on one core. Simulator,
    /// reward and observation are unchanged; networks, batches and episode
    /// length shrink.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.out_dir = PathBuf::from("runs/desk");
        c.sac.hidden = vec![64, 64];
        c.sac.batch_size = 64;
        c.risk.dim = 32;
        c.risk.heads = 4;
        c.risk.ff_dim = 64;
        c.risk.head_hidden = vec![32, 16];
        c.risk.lr = 1e-3;
        c.risk.batch_size = 64;
        c.train.episodes = 120;
        c.train.steps_per_episode = 300;
        c.train.buffer_size = 100_000;
        c.train.learning_starts = 2000;
        c.train.update_every = 2;
        c.train.risk_warmup_episodes = 20;
        c.train.risk_updates_per_episode = 20;
        c.train.checkpoint_every = 20;
        c.train.probe_max_steps = 3000;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// Applies an ablation. Each variant changes exactly one key.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full => {}
            Variant::NoRisk => self.env.weights.risk = 0.0,
            Variant::NoBias => self.risk.beta = 0.0,
        }
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sac.obs_dim != crate::env::OBS_DIM || self.risk.state_dim != crate::env::OBS_DIM {
            return bad("sac.obs_dim and risk.state_dim must match the 98-entry observation");
        }
        if !self.risk.dim.is_multiple_of(self.risk.heads) {
            return bad("risk.dim must be divisible by risk.heads");
        }
        if self.risk.batch_size == 0 || !self.risk.batch_size.is_multiple_of(2) {
            return bad("risk.batch_size must be even and positive");
        }
        if !(self.sac.tau > 0.0 && self.sac.tau <= 1.0) {
            return bad("sac.tau must lie in (0, 1]");
        }
        if self.sac.batch_size == 0 || self.train.update_every == 0 || self.train.steps_per_episode == 0 {
            return bad("batch sizes, update_every and steps_per_episode must be positive");
        }
        if self.env.accel_max <= 0.0 || self.risk.beta < 0.0 {
            return bad("env.accel_max must be positive and risk.beta non-negative");
        }
        Ok(())
    }
}
