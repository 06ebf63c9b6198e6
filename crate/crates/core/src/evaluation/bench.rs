//! Benchmark record loaders.
//!
//! Layouts:
//! - `hotpotqa`, `twowiki`: one JSON array; each record has `_id`, `question`,
//!   `answer`, optional `type`/`level`, and `context` as `[[title, [sentence, ..]], ..]`.
//!   Sentences are concatenated as published (they carry their own spacing).
//! - `musique`: JSON lines with `id`, `question`, `answer`, optional
//!   `answer_aliases`, `paragraphs` (`title`, `paragraph_text`) and
//!   `question_decomposition`, whose length is the hop count.
//! - `lawbench`: a JSON array (or JSON lines) of `instruction`, `question`,
//!   `answer`; the prompt is instruction and question joined by a newline.
//! - `oalqa`: JSON lines with `question`, `answer` and an optional
//!   `source` object holding `citation` and `text`.
//! - `records`: JSON lines of [`QaRecord`] exactly as serialized here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub context_paragraphs: Vec<Paragraph>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkFormat {
    Hotpotqa,
    Twowiki,
    Musique,
    Lawbench,
    Oalqa,
    Records,
}

impl BenchmarkFormat {
    pub const ALL: [BenchmarkFormat; 6] = [
        BenchmarkFormat::Hotpotqa,
        BenchmarkFormat::Twowiki,
        BenchmarkFormat::Musique,
        BenchmarkFormat::Lawbench,
        BenchmarkFormat::Oalqa,
        BenchmarkFormat::Records,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkFormat::Hotpotqa => "hotpotqa",
            BenchmarkFormat::Twowiki => "twowiki",
            BenchmarkFormat::Musique => "musique",
            BenchmarkFormat::Lawbench => "lawbench",
            BenchmarkFormat::Oalqa => "oalqa",
            BenchmarkFormat::Records => "records",
        }
    }
}

impl fmt::Display for BenchmarkFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchmarkFormat::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown benchmark format {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("benchmark file contains no records")]
    Empty,
    #[error("record {index}: invalid JSON: {message}")]
    Json { index: usize, message: String },
    #[error("record {index}: field `{field}`: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },
}

fn schema(index: usize, field: &str, message: impl Into<String>) -> LoadError {
    LoadError::Schema {
        index,
        field: field.to_string(),
        message: message.into(),
    }
}

fn str_field(v: &Value, index: usize, field: &str) -> Result<String, LoadError> {
    match v.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        // Some datasets store numeric answers as numbers.
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(schema(index, field, "expected a string")),
        None => Err(schema(index, field, "missing")),
    }
}

fn opt_str(v: &Value, field: &str) -> Option<String> {
    match v.get(field) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    }
}

fn json_array(text: &str) -> Result<Vec<Value>, LoadError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Array(items)) => Ok(items),
        Ok(_) => Err(LoadError::Json {
            index: 0,
            message: "expected a top-level JSON array".into(),
        }),
        Err(e) => Err(LoadError::Json {
            index: 0,
            message: e.to_string(),
        }),
    }
}

fn json_lines(text: &str) -> Result<Vec<Value>, LoadError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LoadError::Json {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}

fn hotpot_like(items: Vec<Value>) -> Result<Vec<QaRecord>, LoadError> {
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let id = opt_str(v, "_id")
            .or_else(|| opt_str(v, "id"))
            .ok_or_else(|| schema(i, "_id", "missing"))?;
        let question = str_field(v, i, "question")?;
        let answer = str_field(v, i, "answer")?;
        let ctx = v
            .get("context")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(i, "context", "expected an array of [title, sentences]"))?;
        let mut paragraphs = Vec::with_capacity(ctx.len());
        for (j, p) in ctx.iter().enumerate() {
            let bad = || schema(i, &format!("context[{j}]"), "expected [title, [sentence, ..]]");
            let pair = p.as_array().filter(|a| a.len() == 2).ok_or_else(bad)?;
            let title = pair[0].as_str().ok_or_else(bad)?.to_string();
            let sentences = pair[1].as_array().ok_or_else(bad)?;
            let mut text = String::new();
            for s in sentences {
                text.push_str(s.as_str().ok_or_else(bad)?);
            }
            paragraphs.push(Paragraph { title, text });
        }
        let mut metadata = BTreeMap::new();
        for key in ["type", "level"] {
            if let Some(s) = opt_str(v, key) {
                metadata.insert(key.to_string(), s);
            }
        }
        out.push(QaRecord {
            id,
            question,
            gold_answers: vec![answer],
            context_paragraphs: paragraphs,
            metadata,
        });
    }
    Ok(out)
}

fn musique(items: Vec<Value>) -> Result<Vec<QaRecord>, LoadError> {
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let id = str_field(v, i, "id")?;
        let question = str_field(v, i, "question")?;
        let mut golds = vec![str_field(v, i, "answer")?];
        if let Some(aliases) = v.get("answer_aliases") {
            let arr = aliases
                .as_array()
                .ok_or_else(|| schema(i, "answer_aliases", "expected an array"))?;
            for a in arr {
                let a = a
                    .as_str()
                    .ok_or_else(|| schema(i, "answer_aliases", "expected strings"))?;
                if !golds.iter().any(|g| g == a) {
                    golds.push(a.to_string());
                }
            }
        }
        let paras = v
            .get("paragraphs")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(i, "paragraphs", "expected an array"))?;
        let mut paragraphs = Vec::with_capacity(paras.len());
        for (j, p) in paras.iter().enumerate() {
            let field = format!("paragraphs[{j}]");
            paragraphs.push(Paragraph {
                title: opt_str(p, "title").unwrap_or_default(),
                text: opt_str(p, "paragraph_text")
                    .ok_or_else(|| schema(i, &field, "missing paragraph_text"))?,
            });
        }
        let mut metadata = BTreeMap::new();
        if let Some(d) = v.get("question_decomposition") {
            let hops = d
                .as_array()
                .ok_or_else(|| schema(i, "question_decomposition", "expected an array"))?
                .len();
            metadata.insert("hops".to_string(), hops.to_string());
        }
        if let Some((prefix, _)) = id.split_once("__") {
            metadata.insert("type".to_string(), prefix.to_string());
        }
        out.push(QaRecord {
            id,
            question,
            gold_answers: golds,
            context_paragraphs: paragraphs,
            metadata,
        });
    }
    Ok(out)
}

fn lawbench(items: Vec<Value>) -> Result<Vec<QaRecord>, LoadError> {
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let instruction = opt_str(v, "instruction").unwrap_or_default();
        let q = str_field(v, i, "question")?;
        let question = if instruction.trim().is_empty() {
            q
        } else {
            format!("{instruction}\n{q}")
        };
        out.push(QaRecord {
            id: opt_str(v, "id").unwrap_or_else(|| i.to_string()),
            question,
            gold_answers: vec![str_field(v, i, "answer")?],
            context_paragraphs: Vec::new(),
            metadata: BTreeMap::new(),
        });
    }
    Ok(out)
}

fn oalqa(items: Vec<Value>) -> Result<Vec<QaRecord>, LoadError> {
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let mut paragraphs = Vec::new();
        if let Some(src) = v.get("source").filter(|s| !s.is_null()) {
            if !src.is_object() {
                return Err(schema(i, "source", "expected an object"));
            }
            if let Some(text) = opt_str(src, "text") {
                paragraphs.push(Paragraph {
                    title: opt_str(src, "citation").unwrap_or_default(),
                    text,
                });
            }
        }
        out.push(QaRecord {
            id: opt_str(v, "id").unwrap_or_else(|| i.to_string()),
            question: str_field(v, i, "question")?,
            gold_answers: vec![str_field(v, i, "answer")?],
            context_paragraphs: paragraphs,
            metadata: BTreeMap::new(),
        });
    }
    Ok(out)
}

fn own_records(items: Vec<Value>) -> Result<Vec<QaRecord>, LoadError> {
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).map_err(|e| LoadError::Json {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parses benchmark text in the given layout.
pub fn parse_benchmark(text: &str, format: BenchmarkFormat) -> Result<Vec<QaRecord>, LoadError> {
    if text.trim().is_empty() {
        return Err(LoadError::Empty);
    }
    let records = match format {
        BenchmarkFormat::Hotpotqa | BenchmarkFormat::Twowiki => hotpot_like(json_array(text)?)?,
        BenchmarkFormat::Musique => musique(json_lines(text)?)?,
        BenchmarkFormat::Lawbench => {
            let items = if text.trim_start().starts_with('[') {
                json_array(text)?
            } else {
                json_lines(text)?
            };
            lawbench(items)?
        }
        BenchmarkFormat::Oalqa => oalqa(json_lines(text)?)?,
        BenchmarkFormat::Records => own_records(json_lines(text)?)?,
    };
    if records.is_empty() {
        return Err(LoadError::Empty);
    }
    for (i, r) in records.iter().enumerate() {
        if r.gold_answers.is_empty() || r.gold_answers.iter().all(|g| g.trim().is_empty()) {
            return Err(schema(i, "answer", "no usable gold answer"));
        }
    }
    Ok(records)
}

pub fn load_benchmark(path: &Path, format: BenchmarkFormat) -> Result<Vec<QaRecord>, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_benchmark(&text, format)
}
