//! Reviewer clients: a canned fixture client and an HTTP chat-completions client.

use std::collections::HashMap;
use std::io::BufRead;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// One reviewer call. `attempt` starts at 0 and grows on retries.
#[derive(Debug, Clone, Copy)]
pub struct ReviewRequest<'a> {
    pub episode_id: &'a str,
    pub step_id: u32,
    pub prompt: &'a str,
    pub attempt: u32,
}

pub trait ReviewerClient: Send + Sync {
    /// Returns the raw reply text.
    fn complete(&self, request: &ReviewRequest<'_>) -> Result<String, TransportError>;
}

/// Serves replies from a fixture, keyed by episode id. Attempt `n` gets the
/// `n`-th reply, or the last one once the list runs out.
#[derive(Debug, Clone, Default)]
pub struct CannedClient {
    replies: HashMap<String, Vec<String>>,
}

#[derive(Deserialize)]
struct CannedRecord {
    episode_id: String,
    replies: Vec<Value>,
}

impl CannedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_replies(mut self, episode_id: impl Into<String>, replies: Vec<String>) -> Self {
        self.replies.insert(episode_id.into(), replies);
        self
    }

    /// Reads `{"episode_id": ..., "replies": [...]}` lines. A reply given as a
    /// string is used verbatim; any other JSON value is sent re-serialized.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, String> {
        let mut client = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CannedRecord = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
            let replies = rec
                .replies
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                })
                .collect();
            client.replies.insert(rec.episode_id, replies);
        }
        Ok(client)
    }
}

impl ReviewerClient for CannedClient {
    fn complete(&self, request: &ReviewRequest<'_>) -> Result<String, TransportError> {
        let replies = self
            .replies
            .get(request.episode_id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| TransportError(format!("no canned reply for `{}`", request.episode_id)))?;
        let idx = (request.attempt as usize).min(replies.len() - 1);
        Ok(replies[idx].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerClientConfig {
    /// Full URL of an OpenAI-compatible chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_var: Option<String>,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
    pub max_retries: u32,
}

impl Default for ReviewerClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            token_var: None,
            timeout_secs: 60.0,
            max_concurrent: 4,
            max_retries: 2,
        }
    }
}

impl ReviewerClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!("timeout must be > 0, got {}", self.timeout_secs));
        }
        if self.max_concurrent == 0 {
            return Err("max_concurrent must be at least 1".into());
        }
        Ok(())
    }
}

/// Live reviewer over HTTP.
pub struct HttpReviewerClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
}

impl HttpReviewerClient {
    pub fn new(cfg: &ReviewerClientConfig) -> Result<Self, String> {
        cfg.validate()?;
        if cfg.endpoint.is_empty() {
            return Err("reviewer endpoint is not set".into());
        }
        if cfg.model.is_empty() {
            return Err("reviewer model is not set".into());
        }
        let token = match &cfg.token_var {
            Some(var) => Some(std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            token,
        })
    }
}

impl ReviewerClient for HttpReviewerClient {
    fn complete(&self, request: &ReviewRequest<'_>) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| TransportError(e.to_string()))?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError(format!("invalid response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| TransportError("response has no choices[0].message.content".into()))
    }
}
