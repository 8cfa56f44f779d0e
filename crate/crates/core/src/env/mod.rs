//! Environment contract plus its two implementations: the built-in
//! deterministic mini-world and a line-delimited JSON adapter for external
//! engines.

mod external;
mod miniworld;
mod tasks;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{connect_external, ExternalEnv, LaunchSpec, ProtocolExchange};
pub use miniworld::{expert_action, Command, EnvState, MiniWorld, PLACEMENT_RNG, RECEPTACLES};
pub use tasks::{
    enumerate_specs, parse_description, receptacle_type, sample_specs, ParsedTask, TaskKind,
    TaskSpec, DISTRACTORS, OBJECTS, TARGET_RECEPTACLES,
};

pub const DEFAULT_MAX_STEPS: usize = 50;
pub const INVALID_ACTION_OBSERVATION: &str = "Nothing happens.";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown task type `{0}`")]
    UnknownTaskType(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
    #[error("external environment handshake failed: {0}")]
    Handshake(String),
    #[error("external environment protocol violation: {reason} (line: {raw:?})")]
    Protocol { reason: String, raw: String },
    #[error("external environment did not reply within {0:?}")]
    Timeout(std::time::Duration),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: String,
    pub done: bool,
    pub success: bool,
    pub score: f64,
}

impl StepResult {
    pub fn ongoing(observation: impl Into<String>) -> Self {
        Self {
            observation: observation.into(),
            done: false,
            success: false,
            score: 0.0,
        }
    }

    pub fn invalid() -> Self {
        Self::ongoing(INVALID_ACTION_OBSERVATION)
    }
}

pub trait Environment: Send {
    /// Environment name recorded in trajectory metadata.
    fn name(&self) -> &str;

    /// Starts a new episode and returns the initial observation.
    fn reset(&mut self, spec: &TaskSpec) -> Result<String, EnvError>;

    fn step(&mut self, action: &str) -> Result<StepResult, EnvError>;

    /// Scripted solution step, for environments that ship an expert.
    fn expert_action(&self) -> Option<String> {
        None
    }
}

/// Per-task-type step budgets with a shared default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBudget {
    pub default: usize,
    #[serde(default)]
    pub per_task: BTreeMap<String, usize>,
}

impl Default for StepBudget {
    fn default() -> Self {
        Self {
            default: DEFAULT_MAX_STEPS,
            per_task: BTreeMap::new(),
        }
    }
}

impl StepBudget {
    pub fn uniform(max_steps: usize) -> Self {
        Self {
            default: max_steps,
            per_task: BTreeMap::new(),
        }
    }

    pub fn for_task(&self, task_type: &str) -> usize {
        self.per_task
            .get(task_type)
            .copied()
            .unwrap_or(self.default)
    }
}
