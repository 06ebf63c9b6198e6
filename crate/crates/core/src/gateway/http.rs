//! Client for OpenAI-compatible chat-completions and embeddings endpoints.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatRequest, Embedder, GatewayError, LlmGateway};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub embedding_dim: usize,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key: None,
            embedding_dim: 1536,
            timeout_secs: 60,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.freed.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpGateway {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl HttpGateway {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        if config.base_url.trim().is_empty() {
            return Err(GatewayError::Config("base_url is empty".into()));
        }
        if config.embedding_dim == 0 {
            return Err(GatewayError::Config("embedding_dim must be positive".into()));
        }
        if config.retry.max_attempts == 0 {
            return Err(GatewayError::Config("retry.max_attempts must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let policy = &self.config.retry;
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.in_flight.acquire();
                self.post_once(path, body, attempt)
            };
            match result {
                Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                    tracing::warn!(path, attempt, "retrying after: {e}");
                    thread::sleep(policy.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, path: &str, body: &Value, attempts: u32) -> Result<Value, GatewayError> {
        let mut rb = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.config.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| classify(e, attempts))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| classify(e, attempts))?;
        if !status.is_success() {
            return Err(GatewayError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
                attempts,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))
    }
}

fn classify(e: reqwest::Error, attempts: u32) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout { attempts }
    } else {
        GatewayError::Transport {
            message: e.to_string(),
            attempts,
        }
    }
}

impl Embedder for HttpGateway {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("embed called with no texts".into()));
        }
        let body = json!({ "model": self.config.embedding_model, "input": texts });
        let v = self.post("embeddings", &body)?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Decode("embeddings response has no data array".into()))?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let vec: Vec<f64> = serde_json::from_value(item["embedding"].clone())
                .map_err(|e| GatewayError::Decode(format!("embedding {idx}: {e}")))?;
            if vec.len() != self.config.embedding_dim {
                return Err(GatewayError::Decode(format!(
                    "embedding {idx} has dimension {} (configured {})",
                    vec.len(),
                    self.config.embedding_dim
                )));
            }
            let slot = out
                .get_mut(idx)
                .ok_or_else(|| GatewayError::Decode(format!("embedding index {idx} out of range")))?;
            *slot = Some(vec);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| GatewayError::Decode(format!("missing embedding {i}"))))
            .collect()
    }

    fn dimension(&self) -> usize {
        self.config.embedding_dim
    }
}

impl LlmGateway for HttpGateway {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let mut body = json!({
            "model": self.config.chat_model,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        if let Some(n) = req.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let v = self.post("chat/completions", &body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Decode("response has no choices[0].message.content".into()))
    }
}
