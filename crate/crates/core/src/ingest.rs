//! Corpus ingestion: chunking, extraction, embedding and KB upsert.
//!
//! All model work for a batch runs first (optionally in parallel across
//! documents) and produces id-free drafts; ids are then assigned and the
//! knowledge base written in input order, so the result does not depend on
//! scheduling. A failure anywhere in the draft phase leaves the KB untouched.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::{forward_summaries, split_text, ChunkingConfig, ChunkingError};
use crate::extraction::{
    atomize_text, distill_text, extract_tags, ExtractionConfig, ExtractionError, UnitDraft,
};
use crate::gateway::{GatewayError, LlmGateway};
use crate::kb::{validate_kb_integrity, DocumentUpsert, KbError, LayeredKnowledgeBase};
use crate::model::{
    embedding_text, AtomicQuestion, Chunk, ChunkId, DocumentId, DocumentNode, Tag, UnitId,
};

const EMBED_BATCH: usize = 64;

/// One pre-extracted source document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub source_uri: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub chunking: ChunkingConfig,
    pub extraction: ExtractionConfig,
    pub atomize: bool,
    pub distill: bool,
    pub tags: bool,
    /// Documents processed concurrently during the model phase.
    pub parallel: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            chunking: ChunkingConfig::default(),
            extraction: ExtractionConfig::default(),
            atomize: true,
            distill: true,
            tags: false,
            parallel: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("document {uri}: {source}")]
    Chunking {
        uri: String,
        #[source]
        source: ChunkingError,
    },
    #[error("document {uri}: {source}")]
    Extraction {
        uri: String,
        #[source]
        source: ExtractionError,
    },
    #[error("document {uri}: embedding failed: {source}")]
    Embedding {
        uri: String,
        #[source]
        source: GatewayError,
    },
    #[error("document {uri}: {source}")]
    Kb {
        uri: String,
        #[source]
        source: KbError,
    },
    #[error("document {uri}: text is empty")]
    EmptyDocument { uri: String },
    #[error("document source_uri is empty")]
    MissingUri,
    #[error("embedder dimension {embedder} does not match knowledge base dimension {kb}")]
    DimensionMismatch { embedder: usize, kb: usize },
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub replaced: usize,
    pub chunks: usize,
    pub atomics: usize,
    pub units: usize,
    /// Integrity violations of the whole KB after ingestion.
    pub violations: Vec<String>,
}

struct ChunkDraft {
    text: String,
    forward_summary: String,
    tags: Vec<Tag>,
    atomics: Vec<String>,
    units: Vec<UnitDraft>,
    embedding: Vec<f64>,
    atomic_embeddings: Vec<Vec<f64>>,
    unit_embeddings: Vec<Vec<f64>>,
}

struct DocumentDraft {
    chunks: Vec<ChunkDraft>,
    embedding: Option<Vec<f64>>,
}

fn embed_all(gateway: &dyn LlmGateway, texts: Vec<String>) -> Result<Vec<Vec<f64>>, GatewayError> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(EMBED_BATCH) {
        out.extend(gateway.embed(batch)?);
    }
    Ok(out)
}

fn draft_document(
    doc: &CorpusDocument,
    cfg: &IngestConfig,
    gateway: &dyn LlmGateway,
) -> Result<DocumentDraft, IngestError> {
    let uri = || doc.source_uri.clone();
    if doc.text.is_empty() {
        return Err(IngestError::EmptyDocument { uri: uri() });
    }
    let segments = split_text(&doc.text, &cfg.chunking);
    let summaries = forward_summaries(&segments, &cfg.chunking, gateway)
        .map_err(|source| IngestError::Chunking { uri: uri(), source })?;

    let mut chunks = Vec::with_capacity(segments.len());
    for (seg, summary) in segments.into_iter().zip(summaries) {
        let ex = |source| IngestError::Extraction { uri: uri(), source };
        let tags = if cfg.tags {
            extract_tags(seg, &cfg.extraction, gateway).map_err(ex)?
        } else {
            Vec::new()
        };
        let atomics = if cfg.atomize {
            atomize_text(seg, &cfg.extraction, gateway).map_err(ex)?
        } else {
            Vec::new()
        };
        let units = if cfg.distill {
            distill_text(seg, &cfg.extraction, gateway).map_err(ex)?
        } else {
            Vec::new()
        };
        chunks.push(ChunkDraft {
            text: seg.to_string(),
            forward_summary: summary,
            tags,
            atomics,
            units,
            embedding: Vec::new(),
            atomic_embeddings: Vec::new(),
            unit_embeddings: Vec::new(),
        });
    }

    // One ordered list of texts per document keeps embedding calls batched.
    let descriptor = DocumentNode {
        id: DocumentId(0),
        source_uri: doc.source_uri.clone(),
        title: doc.title.clone(),
        metadata: doc.metadata.clone(),
    }
    .descriptor_text();
    let mut texts = Vec::new();
    for c in &chunks {
        texts.push(embedding_text(&c.forward_summary, &c.text));
        texts.extend(c.atomics.iter().cloned());
        texts.extend(
            c.units
                .iter()
                .map(|u| u.clone().into_unit(UnitId(0), ChunkId(0)).render()),
        );
    }
    let has_descriptor = !descriptor.trim().is_empty();
    if has_descriptor {
        texts.push(descriptor);
    }
    let mut vectors = embed_all(gateway, texts)
        .map_err(|source| IngestError::Embedding { uri: uri(), source })?
        .into_iter();
    let mut next = || {
        vectors.next().ok_or_else(|| IngestError::Embedding {
            uri: uri(),
            source: GatewayError::Decode("embedder returned too few vectors".into()),
        })
    };
    for c in &mut chunks {
        c.embedding = next()?;
        for _ in 0..c.atomics.len() {
            let v = next()?;
            c.atomic_embeddings.push(v);
        }
        for _ in 0..c.units.len() {
            let v = next()?;
            c.unit_embeddings.push(v);
        }
    }
    let embedding = if has_descriptor { Some(next()?) } else { None };
    Ok(DocumentDraft { chunks, embedding })
}

/// Ingests `docs` into `kb`. Documents whose `source_uri` is already present
/// replace the stored version and keep its document id.
pub fn ingest_documents(
    kb: &mut LayeredKnowledgeBase,
    docs: &[CorpusDocument],
    cfg: &IngestConfig,
    gateway: &dyn LlmGateway,
) -> Result<IngestReport, IngestError> {
    if gateway.dimension() != kb.embedding_dim() {
        return Err(IngestError::DimensionMismatch {
            embedder: gateway.dimension(),
            kb: kb.embedding_dim(),
        });
    }
    cfg.chunking
        .validate()
        .map_err(|source| IngestError::Chunking {
            uri: String::new(),
            source,
        })?;
    cfg.extraction
        .validate()
        .map_err(|source| IngestError::Extraction {
            uri: String::new(),
            source,
        })?;
    if docs.iter().any(|d| d.source_uri.trim().is_empty()) {
        return Err(IngestError::MissingUri);
    }

    let drafts: Vec<Result<DocumentDraft, IngestError>> = if cfg.parallel <= 1 {
        docs.iter().map(|d| draft_document(d, cfg, gateway)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel)
            .build()
            .map_err(|e| IngestError::Pool(e.to_string()))?;
        pool.install(|| {
            docs.par_iter()
                .map(|d| draft_document(d, cfg, gateway))
                .collect()
        })
    };
    let drafts = drafts.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut report = IngestReport::default();
    for (doc, draft) in docs.iter().zip(drafts) {
        let existing = kb.document_by_uri(&doc.source_uri).map(|d| d.id);
        if existing.is_some() {
            report.replaced += 1;
        }
        let ids = kb.ids();
        let document = DocumentNode {
            id: existing.unwrap_or_else(|| ids.document()),
            source_uri: doc.source_uri.clone(),
            title: doc.title.clone(),
            metadata: doc.metadata.clone(),
        };
        let mut up = DocumentUpsert {
            document,
            embedding: draft.embedding,
            chunks: Vec::new(),
            atomics: Vec::new(),
            units: Vec::new(),
        };
        for (ordinal, c) in draft.chunks.into_iter().enumerate() {
            let chunk_id = ids.chunk();
            for (q, v) in c.atomics.into_iter().zip(c.atomic_embeddings) {
                up.atomics.push(AtomicQuestion {
                    id: ids.atomic(),
                    chunk_id,
                    question_text: q,
                    embedding: v,
                });
            }
            for (u, v) in c.units.into_iter().zip(c.unit_embeddings) {
                let mut unit = u.into_unit(ids.unit(), chunk_id);
                unit.embedding = v;
                up.units.push(unit);
            }
            up.chunks.push(Chunk {
                id: chunk_id,
                document_id: up.document.id,
                ordinal: ordinal as u32,
                text: c.text,
                forward_summary: c.forward_summary,
                embedding: c.embedding,
                tags: c.tags,
            });
        }
        report.documents += 1;
        report.chunks += up.chunks.len();
        report.atomics += up.atomics.len();
        report.units += up.units.len();
        kb.upsert_document(up).map_err(|source| IngestError::Kb {
            uri: doc.source_uri.clone(),
            source,
        })?;
    }
    report.violations = validate_kb_integrity(kb);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Embedder, Matcher, MockGateway, MockScript};

    fn doc(uri: &str, text: &str) -> CorpusDocument {
        CorpusDocument {
            source_uri: uri.into(),
            title: uri.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    fn gateway() -> MockGateway {
        MockGateway::new(
            MockScript::strict()
                .always(Matcher::Tag("summarize".into()), "summary")
                .always(Matcher::Tag("atomize".into()), "What is one?\nWhat is two?")
                .always(Matcher::Tag("distill".into()), "statement\tOne is a number."),
        )
    }

    #[test]
    fn ingest_builds_a_valid_kb() {
        let gw = gateway();
        let mut kb = LayeredKnowledgeBase::new(gw.dimension());
        let cfg = IngestConfig {
            chunking: ChunkingConfig {
                max_chunk_chars: 20,
                min_chunk_chars: 5,
                ..ChunkingConfig::default()
            },
            ..IngestConfig::default()
        };
        let report = ingest_documents(
            &mut kb,
            &[doc("a", "First paragraph.\n\nSecond paragraph."), doc("b", "Tiny.")],
            &cfg,
            &gw,
        )
        .unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert_eq!(report.documents, 2);
        assert_eq!(report.chunks, 3);
        assert_eq!(report.atomics, 6);
        assert_eq!(report.units, 3);
        assert_eq!(gw.calls_tagged("summarize"), 1);
    }

    #[test]
    fn reingest_replaces_and_keeps_document_id() {
        let gw = gateway();
        let mut kb = LayeredKnowledgeBase::new(gw.dimension());
        let cfg = IngestConfig::default();
        ingest_documents(&mut kb, &[doc("a", "Text.")], &cfg, &gw).unwrap();
        let id = kb.document_by_uri("a").unwrap().id;
        let before = kb.counts();
        let report = ingest_documents(&mut kb, &[doc("a", "Text.")], &cfg, &gw).unwrap();
        assert_eq!(report.replaced, 1);
        assert_eq!(kb.document_by_uri("a").unwrap().id, id);
        assert_eq!(kb.counts(), before);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn failure_leaves_kb_untouched() {
        let gw = MockGateway::new(MockScript::strict());
        let mut kb = LayeredKnowledgeBase::new(gw.dimension());
        let err = ingest_documents(&mut kb, &[doc("a", "Text.")], &IngestConfig::default(), &gw)
            .unwrap_err();
        assert!(matches!(err, IngestError::Extraction { .. }));
        assert!(kb.is_empty());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let docs: Vec<_> = (0..6).map(|i| doc(&format!("d{i}"), &format!("Body {i}."))).collect();
        let run = |parallel| {
            let gw = gateway();
            let mut kb = LayeredKnowledgeBase::new(gw.dimension());
            let cfg = IngestConfig {
                parallel,
                ..IngestConfig::default()
            };
            ingest_documents(&mut kb, &docs, &cfg, &gw).unwrap();
            kb
        };
        assert!(run(1).same_content(&run(4)));
    }
}
