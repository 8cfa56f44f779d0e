use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Policy, PolicyError, DEFAULT_MAX_ACTION_CHARS};
use crate::embed::DEFAULT_MAX_IN_FLIGHT;
use crate::http::{HttpError, JsonEndpoint};
use crate::traj::Turn;

pub const ENV_LLM_URL: &str = "EXPRAG_LLM_URL";
pub const ENV_LLM_MODEL: &str = "EXPRAG_LLM_MODEL";
pub const ENV_LLM_TOKEN: &str = "EXPRAG_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteChatConfig {
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub max_action_chars: usize,
}

impl RemoteChatConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout: Duration::from_secs(120),
            attempts: 3,
            backoff: Duration::from_millis(500),
            max_action_chars: DEFAULT_MAX_ACTION_CHARS,
        }
    }

    pub fn from_env() -> Result<Self, PolicyError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let url = var(ENV_LLM_URL)
            .ok_or_else(|| PolicyError::Config(format!("{ENV_LLM_URL} is not set")))?;
        let model = var(ENV_LLM_MODEL)
            .ok_or_else(|| PolicyError::Config(format!("{ENV_LLM_MODEL} is not set")))?;
        let mut cfg = Self::new(url, model);
        cfg.token = var(ENV_LLM_TOKEN);
        Ok(cfg)
    }
}

/// OpenAI-compatible chat-completions client, greedy decoding.
#[derive(Debug)]
pub struct RemoteChatPolicy {
    cfg: RemoteChatConfig,
    endpoint: JsonEndpoint,
}

impl RemoteChatPolicy {
    pub fn new(cfg: RemoteChatConfig) -> Result<Self, PolicyError> {
        let endpoint = JsonEndpoint::new(
            &cfg.base_url,
            cfg.token.clone(),
            cfg.max_in_flight,
            cfg.timeout,
        )?;
        Ok(Self { cfg, endpoint })
    }

    pub fn endpoint(&self) -> &JsonEndpoint {
        &self.endpoint
    }

    fn request(&self, body: &Value) -> Result<String, HttpError> {
        let reply = self.endpoint.post("/v1/chat/completions", body)?;
        let choice = reply
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| HttpError::Decode("reply has no choices[0]".into()))?;
        // A null or missing content is an empty completion, not a protocol error.
        Ok(choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string())
    }
}

impl Policy for RemoteChatPolicy {
    fn name(&self) -> &str {
        "remote_chat"
    }

    fn reply(&self, context: &[Turn]) -> Result<String, PolicyError> {
        let messages: Vec<Value> = context
            .iter()
            .map(|t| json!({"role": t.role.as_str(), "content": t.content}))
            .collect();
        let body = json!({"model": self.cfg.model, "messages": messages, "temperature": 0});

        let attempts = self.cfg.attempts.max(1);
        let mut delay = self.cfg.backoff;
        for attempt in 1..=attempts {
            match self.request(&body) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retriable() && attempt < attempts => {
                    log::warn!("chat endpoint attempt {attempt}/{attempts} failed: {e}");
                    thread::sleep(delay);
                    delay *= 2;
                }
                Err(e) if e.is_retriable() => {
                    return Err(PolicyError::Exhausted { attempts, last: e })
                }
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("loop returns on the last attempt")
    }

    fn max_action_chars(&self) -> usize {
        self.cfg.max_action_chars
    }
}
