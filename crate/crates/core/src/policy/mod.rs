//! Action-producing backends. Every backend sees the same chat context (system
//! message with the memory block, then the dialogue) and answers with one
//! action line.

mod follower;
mod naive;
mod remote;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::HttpError;
use crate::traj::{Role, Turn};

pub use follower::MemoryFollower;
pub use naive::NaivePlacer;
pub use remote::{RemoteChatConfig, RemoteChatPolicy, ENV_LLM_MODEL, ENV_LLM_TOKEN, ENV_LLM_URL};

pub const DEFAULT_MAX_ACTION_CHARS: usize = 200;
/// Action issued when a backend has nothing usable to say.
pub const SENTINEL_ACTION: &str = "look";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context must end with a user message")]
    ContextNotAtObservation,
    #[error("policy endpoint failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: HttpError },
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("policy configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RemoteChat,
    #[default]
    MemoryFollower,
    NaivePlacer,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [
        PolicyKind::RemoteChat,
        PolicyKind::MemoryFollower,
        PolicyKind::NaivePlacer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::RemoteChat => "remote_chat",
            PolicyKind::MemoryFollower => "memory_follower",
            PolicyKind::NaivePlacer => "naive_placer",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.as_str().replace('_', "-") == s)
            .ok_or_else(|| PolicyError::Config(format!("unknown policy kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Never serialized; comes from the environment or the command line.
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_max_action_chars")]
    pub max_action_chars: usize,
}

fn default_max_action_chars() -> usize {
    DEFAULT_MAX_ACTION_CHARS
}

impl PolicyConfig {
    pub fn local(kind: PolicyKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model: None,
            token: None,
            max_action_chars: DEFAULT_MAX_ACTION_CHARS,
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::local(PolicyKind::default())
    }
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &str;

    /// Raw reply for a context that ends with a user message.
    fn reply(&self, context: &[Turn]) -> Result<String, PolicyError>;

    fn max_action_chars(&self) -> usize {
        DEFAULT_MAX_ACTION_CHARS
    }
}

/// First line of `reply`, trimmed and cut to `max_chars` characters. An empty
/// result becomes the sentinel action.
pub fn sanitize_action(reply: &str, max_chars: usize) -> String {
    let line = reply.trim_start().lines().next().unwrap_or("").trim();
    let cut: String = line.chars().take(max_chars).collect();
    let cut = cut.trim_end();
    if cut.is_empty() {
        SENTINEL_ACTION.to_string()
    } else {
        cut.to_string()
    }
}

pub fn decide_action(policy: &dyn Policy, context: &[Turn]) -> Result<String, PolicyError> {
    match context.last() {
        Some(t) if t.role == Role::User => {}
        _ => return Err(PolicyError::ContextNotAtObservation),
    }
    let reply = policy.reply(context)?;
    Ok(sanitize_action(&reply, policy.max_action_chars()))
}

/// Builds a policy through the default registry.
pub fn build_policy(config: &PolicyConfig) -> Result<Box<dyn Policy>, PolicyError> {
    crate::registry::policies()
        .build(config.kind.as_str(), config)
        .map_err(|e| PolicyError::Config(e.to_string()))
}
