//! The training loop: select, roll out, update the policy, rate, mutate,
//! cross over. Also configuration, checkpoints, metrics and replay.

mod checkpoint;
mod env;
mod metrics;
mod trainer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::genetic::GeneticConfig;
use crate::policytoy::{PolicyError, RlConfig};
use crate::population::{PopulationError, SelectionMode, SelectionPolicy};
use crate::rating::{RatingConfig, RatingError};
use crate::reflect::{ReflectError, ReflectorConfig};
use crate::rollout::RolloutError;
use crate::transport::{HttpConfig, TransportError};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use env::{build_reflector, Environment};
pub use metrics::{
    replay_ratings, ChildRecord, Event, HeaderRecord, IterationRecord, MetricsLine, ReplayReport, Stage,
};
pub use trainer::{aggregate_tournament_values, EarlyStop, RunSummary, TrainState, Trainer, METRICS_FILE};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Rollout {
        iteration: u64,
        #[source]
        source: RolloutError,
    },
    #[error("iteration {iteration}: policy update: {source}")]
    Policy {
        iteration: u64,
        #[source]
        source: PolicyError,
    },
    #[error("iteration {iteration}: {source}")]
    Population {
        iteration: u64,
        #[source]
        source: PopulationError,
    },
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Reflect(#[from] ReflectError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metrics line {line}: {message}")]
    Metrics { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Synthetic,
    Http,
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(EnvKind::Synthetic),
            "http" => Ok(EnvKind::Http),
            other => Err(format!("unknown env {other:?}; expected synthetic or http")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Synthetic fixture; the built-in one when unset.
    pub fixture: Option<PathBuf>,
    /// JSON-lines problem set for the HTTP environment.
    pub problems: Option<PathBuf>,
    /// Policy model for HTTP rollouts.
    pub model: String,
    pub temperature: f64,
    pub http: HttpConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Synthetic,
            fixture: None,
            problems: None,
            model: "policy".into(),
            temperature: 1.0,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    pub temperature: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { mode: SelectionMode::Simplified, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsplConfig {
    /// Prompts per tournament.
    pub m: usize,
    /// Rollouts per (prompt, problem).
    pub n: usize,
    pub batch_size: usize,
    /// Selection window: the last `window` prompts.
    pub window: usize,
    /// UCB exploration weight.
    pub lambda: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Overrides the environment's root prompt.
    pub root_prompt: Option<String>,
    pub evolution_enabled: bool,
    pub rl_enabled: bool,
    /// Checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Stop after this many iterations without a new best batch reward.
    pub early_stop_patience: Option<u64>,
    /// Extra attempts after a failed rollout batch.
    pub rollout_retries: u32,
    pub selection: SelectionConfig,
    pub rating: RatingConfig,
    pub genetic: GeneticConfig,
    pub rl: RlConfig,
    pub reflector: ReflectorConfig,
    pub env: EnvConfig,
}

impl Default for EsplConfig {
    fn default() -> Self {
        Self {
            m: 3,
            n: 5,
            batch_size: 10,
            window: 10,
            lambda: 2.0,
            iterations: 300,
            seed: 0,
            root_prompt: None,
            evolution_enabled: true,
            rl_enabled: true,
            checkpoint_every: 0,
            early_stop_patience: None,
            rollout_retries: 2,
            selection: SelectionConfig::default(),
            rating: RatingConfig::default(),
            genetic: GeneticConfig::default(),
            rl: RlConfig::default(),
            reflector: ReflectorConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl EsplConfig {
    pub fn from_toml(text: &str) -> Result<Self, OrchestratorError> {
        toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.m == 0 || self.n == 0 || self.batch_size == 0 || self.window == 0 {
            return bad("m, n, batch_size and window must all be at least 1".into());
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if !(self.selection.temperature > 0.0 && self.selection.temperature.is_finite()) {
            return bad("selection temperature must be positive".into());
        }
        if self.early_stop_patience == Some(0) {
            return bad("early_stop_patience must be at least 1 when set".into());
        }
        self.rating.validate()?;
        self.genetic.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.rl.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if self.reflector.max_principle_chars == 0 {
            return bad("reflector.max_principle_chars must be positive".into());
        }
        Ok(())
    }

    pub fn selection_policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            mode: self.selection.mode,
            lambda: self.lambda,
            temperature: self.selection.temperature,
            m: self.m,
        }
    }

    /// SHA-256 of the config with the iteration budget zeroed, so a run can
    /// be resumed with a larger budget.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.iterations = 0;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
