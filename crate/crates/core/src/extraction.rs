//! Prompt-based derivation of atomic questions, tags and knowledge units.
//!
//! Every gateway response here is a line-oriented protocol:
//! atomize returns one question per line; tag extraction returns
//! `class: value` lines; tag pairing returns `qclass: qvalue => cclass: cvalue`
//! lines; distillation returns tab-separated `triple`, `statement` and `pair`
//! lines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::prompts::names;
use crate::gateway::{registry, GatewayError, LlmGateway};
use crate::model::{AtomicQuestion, Chunk, ChunkId, IdGen, KnowledgeUnit, Tag, UnitKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub atomize_temperature: f64,
    pub max_atomics_per_chunk: usize,
    /// Allowed tag classes; empty admits any class the model reports.
    pub tag_classes: Vec<String>,
    pub distill_kinds: Vec<UnitKind>,
    /// Relation label given to entity-pair units.
    pub pair_relation: String,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            atomize_temperature: 0.7,
            max_atomics_per_chunk: 12,
            tag_classes: Vec::new(),
            distill_kinds: UnitKind::ALL.to_vec(),
            pair_relation: "related_to".into(),
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if !(0.0..=2.0).contains(&self.atomize_temperature) {
            return Err(ExtractionError::InvalidConfig(format!(
                "atomize_temperature {} outside [0, 2]",
                self.atomize_temperature
            )));
        }
        if self.max_atomics_per_chunk == 0 {
            return Err(ExtractionError::InvalidConfig(
                "max_atomics_per_chunk must be at least 1".into(),
            ));
        }
        if self.pair_relation.trim().is_empty() {
            return Err(ExtractionError::InvalidConfig("pair_relation is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?:[-*•]+\s*|\(?\d{1,3}[.):]\s*|[Qq]\d{1,3}[.:)]\s*)").expect("valid regex")
    })
}

/// Trims a line and removes a leading bullet or list number.
pub(crate) fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    match list_marker().find(t) {
        Some(m) => t[m.end()..].trim(),
        None => t,
    }
}

/// Question lines of an atomize response: interrogative, deduplicated
/// case-insensitively, at most `max` in response order.
pub fn parse_atomic_questions(response: &str, max: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in response.lines() {
        let q = strip_list_marker(line);
        if q.is_empty() || !(q.ends_with('?') || q.ends_with('？')) {
            continue;
        }
        if seen.insert(q.to_lowercase()) {
            out.push(q.to_string());
            if out.len() == max {
                break;
            }
        }
    }
    out
}

/// Atomic question texts for a chunk body.
pub fn atomize_text(
    text: &str,
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
) -> Result<Vec<String>, ExtractionError> {
    let req = registry()
        .request(names::ATOMIZE, &[("chunk", text)], cfg.atomize_temperature)
        .expect("atomize bindings are complete");
    let response = gateway.complete(&req)?;
    let questions = parse_atomic_questions(&response, cfg.max_atomics_per_chunk);
    if questions.is_empty() && !response.trim().is_empty() {
        tracing::warn!("atomize response had no usable question lines");
    }
    Ok(questions)
}

/// Atomic questions linked to `chunk`, without embeddings.
pub fn atomize_chunk(
    chunk: &Chunk,
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
    ids: &IdGen,
) -> Result<Vec<AtomicQuestion>, ExtractionError> {
    cfg.validate()?;
    Ok(atomize_text(&chunk.text, cfg, gateway)?
        .into_iter()
        .map(|q| AtomicQuestion {
            id: ids.atomic(),
            chunk_id: chunk.id,
            question_text: q,
            embedding: Vec::new(),
        })
        .collect())
}

fn parse_tag(line: &str) -> Option<Tag> {
    let (class, value) = strip_list_marker(line).split_once(':')?;
    let tag = Tag::new(class.trim(), value.trim());
    tag.is_valid().then_some(tag)
}

/// `class: value` lines, filtered to `classes` (case-insensitive) when non-empty.
pub fn parse_tags(response: &str, classes: &[String]) -> Vec<Tag> {
    let mut seen = HashSet::new();
    response
        .lines()
        .filter_map(parse_tag)
        .filter(|t| {
            classes.is_empty() || classes.iter().any(|c| c.eq_ignore_ascii_case(&t.tag_class))
        })
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

pub fn extract_tags(
    text: &str,
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
) -> Result<Vec<Tag>, ExtractionError> {
    let classes = if cfg.tag_classes.is_empty() {
        "any".to_string()
    } else {
        cfg.tag_classes.join(", ")
    };
    let req = registry()
        .request(
            names::TAG_EXTRACT,
            &[("tag_classes", &classes), ("text", text)],
            0.0,
        )
        .expect("tag_extract bindings are complete");
    let response = gateway.complete(&req)?;
    Ok(parse_tags(&response, &cfg.tag_classes))
}

pub type TagPairMap = BTreeMap<Tag, Tag>;

#[derive(Debug, Default)]
pub struct TagPairReport {
    pub pairs: TagPairMap,
    /// Index of each sample that failed, with the cause.
    pub failures: Vec<(usize, GatewayError)>,
}

fn parse_pair_line(line: &str) -> Option<(Tag, Tag)> {
    let (q, c) = strip_list_marker(line).split_once("=>")?;
    Some((parse_tag(q)?, parse_tag(c)?))
}

fn tag_lines(tags: &[Tag]) -> String {
    if tags.is_empty() {
        return "None".into();
    }
    tags.iter().map(Tag::to_string).collect::<Vec<_>>().join("\n")
}

/// Learns query-tag → corpus-tag pairs from (query, answer chunk text)
/// samples. Later pairs overwrite earlier ones for the same query tag.
pub fn build_tag_pair_map(
    samples: &[(String, String)],
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
) -> TagPairReport {
    let mut report = TagPairReport::default();
    for (i, (query, chunk_text)) in samples.iter().enumerate() {
        let result = (|| -> Result<Vec<(Tag, Tag)>, ExtractionError> {
            let query_tags = extract_tags(query, cfg, gateway)?;
            let corpus_tags = extract_tags(chunk_text, cfg, gateway)?;
            let req = registry()
                .request(
                    names::TAG_PAIR,
                    &[
                        ("query", query),
                        ("query_tags", &tag_lines(&query_tags)),
                        ("corpus_tags", &tag_lines(&corpus_tags)),
                    ],
                    0.0,
                )
                .expect("tag_pair bindings are complete");
            let response = gateway.complete(&req)?;
            Ok(response.lines().filter_map(parse_pair_line).collect())
        })();
        match result {
            Ok(pairs) => report.pairs.extend(pairs),
            Err(ExtractionError::Gateway(e)) => {
                tracing::warn!(sample = i, "tag pairing failed: {e}");
                report.failures.push((i, e));
            }
            Err(e) => unreachable!("tag pairing has no config errors: {e}"),
        }
    }
    report
}

/// Query tags rewritten into corpus vocabulary: mapped through `pairs` when a
/// key matches, else kept only if the corpus already uses the tag.
pub fn map_query_tags(
    query: &str,
    pairs: &TagPairMap,
    corpus_tags: &BTreeSet<Tag>,
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
) -> Result<Vec<Tag>, ExtractionError> {
    let mut seen = HashSet::new();
    Ok(extract_tags(query, cfg, gateway)?
        .into_iter()
        .filter_map(|t| match pairs.get(&t) {
            Some(mapped) => Some(mapped.clone()),
            None => corpus_tags.contains(&t).then_some(t),
        })
        .filter(|t| seen.insert(t.clone()))
        .collect())
}

/// A parsed knowledge unit before it is given an id and a source chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitDraft {
    pub kind: UnitKind,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub statement: String,
}

impl UnitDraft {
    pub fn into_unit(self, id: crate::model::UnitId, source: ChunkId) -> KnowledgeUnit {
        KnowledgeUnit {
            id,
            kind: self.kind,
            subject: self.subject,
            relation: self.relation,
            object: self.object,
            statement: self.statement,
            source_chunk_id: source,
            embedding: Vec::new(),
        }
    }
}

fn parse_unit_line(line: &str, pair_relation: &str) -> Option<UnitDraft> {
    let fields: Vec<&str> = line.trim().split('\t').map(str::trim).collect();
    let filled = |s: &&str| !s.is_empty();
    let draft = match fields.as_slice() {
        ["triple", s, r, o] if [s, r, o].iter().all(|f| filled(f)) => UnitDraft {
            kind: UnitKind::Triple,
            subject: s.to_string(),
            relation: r.to_string(),
            object: o.to_string(),
            statement: String::new(),
        },
        ["statement", text] if filled(text) => UnitDraft {
            kind: UnitKind::AtomicStatement,
            subject: String::new(),
            relation: String::new(),
            object: String::new(),
            statement: text.to_string(),
        },
        ["pair", s, o] if filled(s) && filled(o) => UnitDraft {
            kind: UnitKind::EntityPair,
            subject: s.to_string(),
            relation: pair_relation.to_string(),
            object: o.to_string(),
            statement: String::new(),
        },
        _ => return None,
    };
    Some(draft)
}

/// Well-formed unit lines of the configured kinds; anything else is dropped.
pub fn parse_units(response: &str, cfg: &ExtractionConfig) -> Vec<UnitDraft> {
    response
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let parsed = parse_unit_line(l, &cfg.pair_relation);
            if parsed.is_none() {
                tracing::debug!(line = l, "dropping malformed unit line");
            }
            parsed
        })
        .filter(|u| cfg.distill_kinds.contains(&u.kind))
        .collect()
}

fn kind_name(kind: UnitKind) -> &'static str {
    match kind {
        UnitKind::Triple => "triple",
        UnitKind::AtomicStatement => "statement",
        UnitKind::EntityPair => "pair",
    }
}

pub fn distill_text(
    text: &str,
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
) -> Result<Vec<UnitDraft>, ExtractionError> {
    if cfg.distill_kinds.is_empty() {
        return Ok(Vec::new());
    }
    let kinds = cfg
        .distill_kinds
        .iter()
        .map(|k| kind_name(*k))
        .collect::<Vec<_>>()
        .join(", ");
    let req = registry()
        .request(
            names::DISTILL,
            &[
                ("pair_relation", &cfg.pair_relation),
                ("kinds", &kinds),
                ("chunk", text),
            ],
            0.0,
        )
        .expect("distill bindings are complete");
    Ok(parse_units(&gateway.complete(&req)?, cfg))
}

/// Knowledge units distilled from `chunk`, without embeddings.
pub fn distill_chunk(
    chunk: &Chunk,
    cfg: &ExtractionConfig,
    gateway: &dyn LlmGateway,
    ids: &IdGen,
) -> Result<Vec<KnowledgeUnit>, ExtractionError> {
    cfg.validate()?;
    Ok(distill_text(&chunk.text, cfg, gateway)?
        .into_iter()
        .map(|d| d.into_unit(ids.unit(), chunk.id))
        .collect())
}
