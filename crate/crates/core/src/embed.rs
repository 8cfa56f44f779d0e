//! Trajectory encoders: the key/query embedding function behind the index.
//!
//! Every vector handed out is L2-normalized, so dot product equals cosine
//! similarity. Dot products accumulate in `f64` in ascending component order,
//! which makes scores bitwise reproducible.

use std::env;
use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{HttpError, JsonEndpoint};

pub const DEFAULT_LOCAL_DIM: usize = 256;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

pub const ENV_EMBED_URL: &str = "EXPRAG_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "EXPRAG_EMBED_MODEL";
pub const ENV_EMBED_TOKEN: &str = "EXPRAG_EMBED_TOKEN";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("embedder configuration: {0}")]
    Config(String),
    #[error("malformed embeddings response: {0}")]
    Response(String),
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// L2-normalizes `raw`. A zero (or non-finite) vector is degenerate.
    pub fn normalized(raw: &[f64]) -> Result<Self, EmbedError> {
        if raw.is_empty() {
            return Err(EmbedError::Degenerate("zero-dimensional vector".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbedError::Degenerate(format!("vector norm is {norm}")));
        }
        Ok(Self {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
        })
    }

    /// Wraps values that are already unit-norm (e.g. read back from an index file).
    pub fn from_unit_values(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> EmbeddingVector {
        EmbeddingVector {
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

/// Dot product in ascending component order with `f64` accumulation.
/// Callers guarantee equal lengths.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        acc += a[i] as f64 * b[i] as f64;
    }
    acc
}

pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(&a.values, &b.values))
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

pub trait Embedder: Send + Sync {
    /// Stable identifier recorded in index manifests, e.g. `local_hash:256`.
    fn id(&self) -> String;

    /// Output dimension when known up front.
    fn dim(&self) -> Option<usize>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbedError::Response("empty batch result".into()))
    }
}

/// Signed feature hashing of lowercase word bigrams.
///
/// A single-word text hashes that word alone; an empty or whitespace-only
/// text is degenerate.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
}

impl LocalHashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Config("dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    fn bucket(&self, first: &str, second: &str) -> (usize, f64) {
        let mut h = FnvHasher::default();
        h.write(first.as_bytes());
        h.write(&[0x1f]);
        h.write(second.as_bytes());
        let hash = h.finish();
        let sign = if hash >> 63 == 1 { -1.0 } else { 1.0 };
        ((hash % self.dim as u64) as usize, sign)
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        let mut acc = vec![0.0f64; self.dim];
        match words.as_slice() {
            [] => return Err(EmbedError::Degenerate("text has no words".into())),
            [only] => {
                let (i, s) = self.bucket(only, "");
                acc[i] += s;
            }
            _ => {
                for pair in words.windows(2) {
                    let (i, s) = self.bucket(pair[0], pair[1]);
                    acc[i] += s;
                }
            }
        }
        EmbeddingVector::normalized(&acc)
    }
}

impl Default for LocalHashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_LOCAL_DIM,
        }
    }
}

impl Embedder for LocalHashEmbedder {
    fn id(&self) -> String {
        format!("local_hash:{}", self.dim)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub expected_dim: Option<usize>,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteEmbedderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: None,
            expected_dim: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads `EXPRAG_EMBED_URL`, `EXPRAG_EMBED_MODEL` and `EXPRAG_EMBED_TOKEN`.
    pub fn from_env() -> Result<Self, EmbedError> {
        let url = env::var(ENV_EMBED_URL)
            .map_err(|_| EmbedError::Config(format!("{ENV_EMBED_URL} is not set")))?;
        let model = env::var(ENV_EMBED_MODEL)
            .map_err(|_| EmbedError::Config(format!("{ENV_EMBED_MODEL} is not set")))?;
        let mut cfg = Self::new(url, model);
        cfg.token = env::var(ENV_EMBED_TOKEN).ok();
        Ok(cfg)
    }
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
#[derive(Debug)]
pub struct RemoteEmbedder {
    endpoint: JsonEndpoint,
    model: String,
    expected_dim: Option<usize>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        if cfg.model.is_empty() {
            return Err(EmbedError::Config("model name is empty".into()));
        }
        let endpoint = JsonEndpoint::new(&cfg.base_url, cfg.token, cfg.max_in_flight, cfg.timeout)?;
        Ok(Self {
            endpoint,
            model: cfg.model,
            expected_dim: cfg.expected_dim,
        })
    }

    pub fn endpoint(&self) -> &JsonEndpoint {
        &self.endpoint
    }

    fn decode(&self, reply: &Value, n: usize) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Response("missing `data` array".into()))?;
        if data.len() != n {
            return Err(EmbedError::Response(format!(
                "expected {n} embeddings, got {}",
                data.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| EmbedError::Response(format!("data[{pos}].embedding missing")))?
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        EmbedError::Response(format!("data[{pos}].embedding has a non-number"))
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        let mut out = Vec::with_capacity(n);
        for (_, values) in rows {
            let expected = self
                .expected_dim
                .or_else(|| out.first().map(EmbeddingVector::dim));
            if let Some(expected) = expected {
                if values.len() != expected {
                    return Err(EmbedError::DimensionMismatch {
                        expected,
                        got: values.len(),
                    });
                }
            }
            out.push(EmbeddingVector::normalized(&values)?);
        }
        Ok(out)
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dim(&self) -> Option<usize> {
        self.expected_dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(EmbedError::Degenerate(format!("input {i} is empty")));
        }
        let body = json!({ "model": self.model, "input": texts });
        let reply = self.endpoint.post("/v1/embeddings", &body)?;
        self.decode(&reply, texts.len())
    }
}

/// Rebuilds an embedder from the id stored in an index manifest. Remote ids
/// take endpoint and credentials from the environment.
pub fn embedder_from_id(id: &str) -> Result<Box<dyn Embedder>, EmbedError> {
    match id.split_once(':') {
        Some(("local_hash", dim)) => {
            let dim = dim
                .parse()
                .map_err(|_| EmbedError::Config(format!("bad local_hash dimension in `{id}`")))?;
            Ok(Box::new(LocalHashEmbedder::new(dim)?))
        }
        Some(("remote", model)) => {
            let mut cfg = RemoteEmbedderConfig::from_env()?;
            cfg.model = model.to_string();
            Ok(Box::new(RemoteEmbedder::new(cfg)?))
        }
        _ => Err(EmbedError::Config(format!("unknown embedder id `{id}`"))),
    }
}
