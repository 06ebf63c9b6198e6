//! Chat-completion and embedding boundary.

mod embed;
mod http;
mod mock;
pub mod prompts;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{HashEmbedder, MOCK_EMBEDDING_DIM};
pub use http::{HttpConfig, HttpGateway, RetryPolicy};
pub use mock::{
    last_field, Matcher, MockCall, MockGateway, MockScript, Reply, ScriptEntry, ScriptFile,
    ScriptFileEntry,
};
pub use prompts::{registry, render, PromptError, PromptRegistry, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Name of the registered prompt template that produced this request.
    pub tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest(format!(
                "request {:?} has no messages",
                self.tag
            )));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Concatenated message contents, used by mock matchers.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("could not decode endpoint response: {0}")]
    Decode(String),
    #[error("mock script has no entry matching request tagged {tag:?}")]
    Script { tag: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Attempts made before giving up, for transport-level failures.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            Self::Transport { attempts, .. }
            | Self::Timeout { attempts }
            | Self::Status { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }

    /// Whether the failure class is retried by the live client.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Timeout { .. } => true,
            Self::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

pub trait Embedder: Send + Sync {
    /// One vector per input text, each of length [`dimension`](Self::dimension).
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;

    fn dimension(&self) -> usize;

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut v = self.embed(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| GatewayError::Decode("embedder returned no vector".into()))
    }
}

pub trait LlmGateway: Embedder {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub request: ChatRequest,
    pub response: String,
}

/// Wraps a gateway and keeps every completed exchange in call order.
pub struct Recorder<'a> {
    gateway: &'a dyn LlmGateway,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl<'a> Recorder<'a> {
    pub fn new(gateway: &'a dyn LlmGateway) -> Self {
        Self {
            gateway,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn gateway(&self) -> &'a dyn LlmGateway {
        self.gateway
    }

    pub fn complete(&self, req: ChatRequest) -> Result<String, GatewayError> {
        let response = self.gateway.complete(&req)?;
        self.entries.lock().unwrap().push(TranscriptEntry {
            tag: req.tag.clone(),
            request: req,
            response: response.clone(),
        });
        Ok(response)
    }

    /// Renders a registered template and completes it.
    pub fn ask(
        &self,
        template: &str,
        bindings: &[(&str, &str)],
        temperature: f64,
    ) -> Result<String, GatewayError> {
        let req = registry().request(template, bindings, temperature)?;
        self.complete(req)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        self.gateway.embed(texts)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn into_entries(self) -> Vec<TranscriptEntry> {
        self.entries.into_inner().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let mut req = registry().request("cot", &[("question", "q")], 0.0).unwrap();
        assert!(req.validate().is_ok());
        req.temperature = 2.5;
        assert!(req.validate().is_err());
        req.temperature = 0.0;
        req.messages.clear();
        assert!(req.validate().is_err());
    }

    #[test]
    fn retryable_classes() {
        let s = |status| GatewayError::Status {
            status,
            body: String::new(),
            attempts: 1,
        };
        assert!(s(429).is_retryable());
        assert!(s(503).is_retryable());
        assert!(!s(400).is_retryable());
        assert!(GatewayError::Timeout { attempts: 3 }.is_retryable());
        assert!(!GatewayError::Decode("x".into()).is_retryable());
    }
}
