//! Blocking JSON-over-HTTP plumbing shared by the remote embedder and the
//! remote chat policy.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode response: {0}")]
    Decode(String),
}

impl HttpError {
    /// Transport faults and 5xx/429 replies are worth retrying.
    pub fn is_retriable(&self) -> bool {
        match self {
            HttpError::Transport(_) => true,
            HttpError::Status { status, .. } => *status >= 500 || *status == 429,
            HttpError::Decode(_) => false,
        }
    }
}

/// Counting gate bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct InFlightGate {
    limit: usize,
    state: Mutex<GateState>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct GateState {
    active: usize,
    peak: usize,
}

pub struct GatePermit<'a> {
    gate: &'a InFlightGate,
}

impl InFlightGate {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(GateState::default()),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut st = self.state.lock().expect("gate lock poisoned");
        while st.active >= self.limit {
            st = self.freed.wait(st).expect("gate lock poisoned");
        }
        st.active += 1;
        st.peak = st.peak.max(st.active);
        GatePermit { gate: self }
    }

    /// Highest number of simultaneously held permits observed so far.
    pub fn peak(&self) -> usize {
        self.state.lock().expect("gate lock poisoned").peak
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().expect("gate lock poisoned");
        st.active -= 1;
        self.gate.freed.notify_one();
    }
}

/// An endpoint base URL plus credentials, with a bounded request gate.
#[derive(Debug)]
pub struct JsonEndpoint {
    base: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl JsonEndpoint {
    pub fn new(
        base: &str,
        token: Option<String>,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            token: token.filter(|t| !t.is_empty()),
            client,
            gate: InFlightGate::new(max_in_flight),
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn gate(&self) -> &InFlightGate {
        &self.gate
    }

    /// POSTs `body` to `<base><path>` and returns the decoded JSON reply.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value, HttpError> {
        let _permit = self.gate.acquire();
        let mut req = self
            .client
            .post(format!("{}{}", self.base, path))
            .json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(HttpError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()))
    }
}
