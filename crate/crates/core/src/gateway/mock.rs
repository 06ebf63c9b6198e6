//! Scripted gateway for tests and offline runs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, Embedder, GatewayError, HashEmbedder, LlmGateway};

type Predicate = Arc<dyn Fn(&ChatRequest) -> bool + Send + Sync>;
type Responder = Arc<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

#[derive(Clone)]
pub enum Matcher {
    Any,
    Tag(String),
    /// Substring of the concatenated message contents.
    Contains(String),
    All(Vec<Matcher>),
    Predicate(Predicate),
}

impl Matcher {
    pub fn predicate(f: impl Fn(&ChatRequest) -> bool + Send + Sync + 'static) -> Self {
        Self::Predicate(Arc::new(f))
    }

    pub fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            Self::Any => true,
            Self::Tag(t) => req.tag == *t,
            Self::Contains(s) => req.messages.iter().any(|m| m.content.contains(s.as_str())),
            Self::All(ms) => ms.iter().all(|m| m.matches(req)),
            Self::Predicate(f) => f(req),
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Any => write!(f, "Any"),
            Self::Tag(t) => write!(f, "Tag({t:?})"),
            Self::Contains(s) => write!(f, "Contains({s:?})"),
            Self::All(ms) => f.debug_tuple("All").field(ms).finish(),
            Self::Predicate(_) => write!(f, "Predicate(..)"),
        }
    }
}

#[derive(Clone)]
pub enum Reply {
    Text(String),
    /// Computed from the request; `None` means "does not apply", and matching
    /// continues with the next entry.
    Dynamic(Responder),
}

impl fmt::Debug for Reply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Text(t) => write!(f, "Text({t:?})"),
            Self::Dynamic(_) => write!(f, "Dynamic(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub reply: Reply,
    /// Remaining uses; `None` never runs out.
    pub times: Option<usize>,
}

/// Ordered list of scripted replies. Each request takes the first live entry
/// that matches it; entries with a use count are consumed.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: Vec<ScriptEntry>,
    strict: bool,
    fallback: Option<String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unmatched requests fail instead of getting the fallback reply.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::default()
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    /// Reply for unmatched requests in non-strict mode (default: empty text).
    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn push(&mut self, entry: ScriptEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: MockScript) {
        self.entries.extend(other.entries);
    }

    /// A reply usable once.
    pub fn once(mut self, matcher: Matcher, text: impl Into<String>) -> Self {
        self.push(ScriptEntry {
            matcher,
            reply: Reply::Text(text.into()),
            times: Some(1),
        });
        self
    }

    /// A reply usable any number of times.
    pub fn always(mut self, matcher: Matcher, text: impl Into<String>) -> Self {
        self.push(ScriptEntry {
            matcher,
            reply: Reply::Text(text.into()),
            times: None,
        });
        self
    }

    /// A reusable computed reply for requests carrying `tag`.
    pub fn respond(
        mut self,
        tag: &str,
        f: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.push(ScriptEntry {
            matcher: Matcher::Tag(tag.to_string()),
            reply: Reply::Dynamic(Arc::new(f)),
            times: None,
        });
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries with uses left.
    pub fn remaining(&self) -> usize {
        self.entries.iter().filter(|e| e.times != Some(0)).count()
    }

    pub fn next_reply(&mut self, req: &ChatRequest) -> Result<String, GatewayError> {
        for entry in &mut self.entries {
            if entry.times == Some(0) || !entry.matcher.matches(req) {
                continue;
            }
            let text = match &entry.reply {
                Reply::Text(t) => t.clone(),
                Reply::Dynamic(f) => match f(req) {
                    Some(t) => t,
                    None => continue,
                },
            };
            if let Some(n) = entry.times.as_mut() {
                *n -= 1;
            }
            return Ok(text);
        }
        if self.strict {
            return Err(GatewayError::Script {
                tag: req.tag.clone(),
            });
        }
        Ok(self.fallback.clone().unwrap_or_default())
    }
}

/// JSON form of a static script.
///
/// ```json
/// { "strict": true,
///   "fallback": "",
///   "entries": [ { "tag": "propose", "contains": ["Question: ..."],
///                  "response": "...", "times": 1 } ] }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(default)]
    pub entries: Vec<ScriptFileEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFileEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
}

impl ScriptFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("parsing {}: {e}", path.display())))
    }

    pub fn into_script(self) -> MockScript {
        let mut script = MockScript {
            strict: self.strict,
            fallback: self.fallback,
            entries: Vec::new(),
        };
        for e in self.entries {
            let mut ms: Vec<Matcher> = e.tag.into_iter().map(Matcher::Tag).collect();
            ms.extend(e.contains.into_iter().map(Matcher::Contains));
            let matcher = match ms.len() {
                0 => Matcher::Any,
                1 => ms.pop().unwrap(),
                _ => Matcher::All(ms),
            };
            script.push(ScriptEntry {
                matcher,
                reply: Reply::Text(e.response),
                times: e.times,
            });
        }
        script
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub tag: String,
    pub request: ChatRequest,
    pub response: Result<String, GatewayError>,
}

/// Gateway backed by a [`MockScript`] and a [`HashEmbedder`].
pub struct MockGateway {
    script: Mutex<MockScript>,
    embedder: HashEmbedder,
    calls: Mutex<Vec<MockCall>>,
    embed_calls: Mutex<usize>,
}

impl MockGateway {
    pub fn new(script: MockScript) -> Self {
        Self::with_embedder(script, HashEmbedder::default())
    }

    pub fn with_embedder(script: MockScript, embedder: HashEmbedder) -> Self {
        Self {
            script: Mutex::new(script),
            embedder,
            calls: Mutex::new(Vec::new()),
            embed_calls: Mutex::new(0),
        }
    }

    pub fn embedder(&self) -> &HashEmbedder {
        &self.embedder
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn calls_tagged(&self, tag: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| c.tag == tag).count()
    }

    pub fn embed_call_count(&self) -> usize {
        *self.embed_calls.lock().unwrap()
    }

    pub fn remaining_entries(&self) -> usize {
        self.script.lock().unwrap().remaining()
    }
}

impl Embedder for MockGateway {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        *self.embed_calls.lock().unwrap() += 1;
        self.embedder.embed(texts)
    }

    fn dimension(&self) -> usize {
        self.embedder.dimension()
    }
}

impl LlmGateway for MockGateway {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let response = self.script.lock().unwrap().next_reply(req);
        self.calls.lock().unwrap().push(MockCall {
            tag: req.tag.clone(),
            request: req.clone(),
            response: response.clone(),
        });
        if let Err(e) = &response {
            tracing::debug!(tag = %req.tag, "mock script miss: {e}");
        }
        response
    }
}

/// Value of the last line of `text` that starts with `prefix`, trimmed.
pub fn last_field<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines()
        .rev()
        .find_map(|l| l.strip_prefix(prefix))
        .map(str::trim)
}
