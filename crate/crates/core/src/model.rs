//! Domain types shared by every layer of the engine.
//!
//! Identifiers are opaque monotonic tokens handed out by an [`IdGen`]; they
//! carry no information about the content they name.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "-{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// Identifier of a [`DocumentNode`].
    DocumentId,
    "doc"
);
id_newtype!(
    /// Identifier of a [`Chunk`].
    ChunkId,
    "chunk"
);
id_newtype!(
    /// Identifier of an [`AtomicQuestion`].
    AtomicId,
    "atomic"
);
id_newtype!(
    /// Identifier of a [`KnowledgeUnit`].
    UnitId,
    "unit"
);

/// Monotonic id source. One per knowledge base; safe to share across threads.
#[derive(Debug, Default)]
pub struct IdGen {
    next: AtomicU64,
}

impl IdGen {
    pub fn starting_at(next: u64) -> Self {
        Self {
            next: AtomicU64::new(next),
        }
    }

    pub fn next_raw(&self) -> u64 {
        self.next.fetch_add(1, Ordering::Relaxed)
    }

    /// The value the next allocation will return.
    pub fn peek(&self) -> u64 {
        self.next.load(Ordering::Relaxed)
    }

    /// Never moves the counter backwards.
    pub fn bump_past(&self, used: u64) {
        self.next.fetch_max(used + 1, Ordering::Relaxed);
    }

    pub fn document(&self) -> DocumentId {
        DocumentId(self.next_raw())
    }
    pub fn chunk(&self) -> ChunkId {
        ChunkId(self.next_raw())
    }
    pub fn atomic(&self) -> AtomicId {
        AtomicId(self.next_raw())
    }
    pub fn unit(&self) -> UnitId {
        UnitId(self.next_raw())
    }
}

/// A node anywhere in the layered graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "layer", content = "id", rename_all = "snake_case")]
pub enum NodeRef {
    Document(DocumentId),
    Chunk(ChunkId),
    Atomic(AtomicId),
    Unit(UnitId),
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Document(id) => id.fmt(f),
            NodeRef::Chunk(id) => id.fmt(f),
            NodeRef::Atomic(id) => id.fmt(f),
            NodeRef::Unit(id) => id.fmt(f),
        }
    }
}

/// Information-resource layer node: one source document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentNode {
    pub id: DocumentId,
    pub source_uri: String,
    pub title: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl DocumentNode {
    /// Text used to embed the document node: title followed by sorted metadata.
    pub fn descriptor_text(&self) -> String {
        let mut out = self.title.clone();
        for (k, v) in &self.metadata {
            out.push('\n');
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub tag_class: String,
    pub value: String,
}

impl Tag {
    pub fn new(tag_class: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            tag_class: tag_class.into(),
            value: value.into(),
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.tag_class.trim().is_empty() && !self.value.trim().is_empty()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.tag_class, self.value)
    }
}

/// Corpus layer node: a contiguous segment of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub document_id: DocumentId,
    pub ordinal: u32,
    pub text: String,
    /// Rolling summary of everything before this chunk; empty for ordinal 0.
    pub forward_summary: String,
    #[serde(skip)]
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub tags: Vec<Tag>,
}

impl Chunk {
    /// The text that gets embedded: the forward summary (if any) and the chunk
    /// body separated by a blank line.
    pub fn embedding_text(&self) -> String {
        embedding_text(&self.forward_summary, &self.text)
    }
}

pub fn embedding_text(forward_summary: &str, text: &str) -> String {
    if forward_summary.is_empty() {
        text.to_string()
    } else {
        format!("{forward_summary}\n\n{text}")
    }
}

/// A question that one chunk can answer; the fine-grained retrieval key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicQuestion {
    pub id: AtomicId,
    pub chunk_id: ChunkId,
    pub question_text: String,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Triple,
    AtomicStatement,
    EntityPair,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [
        UnitKind::Triple,
        UnitKind::AtomicStatement,
        UnitKind::EntityPair,
    ];
}

/// Distilled-knowledge layer node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeUnit {
    pub id: UnitId,
    pub kind: UnitKind,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub statement: String,
    pub source_chunk_id: ChunkId,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

impl KnowledgeUnit {
    pub fn triple(
        id: UnitId,
        source: ChunkId,
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            id,
            kind: UnitKind::Triple,
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            statement: String::new(),
            source_chunk_id: source,
            embedding: Vec::new(),
        }
    }

    pub fn statement(id: UnitId, source: ChunkId, statement: impl Into<String>) -> Self {
        Self {
            id,
            kind: UnitKind::AtomicStatement,
            subject: String::new(),
            relation: String::new(),
            object: String::new(),
            statement: statement.into(),
            source_chunk_id: source,
            embedding: Vec::new(),
        }
    }

    pub fn entity_pair(
        id: UnitId,
        source: ChunkId,
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            kind: UnitKind::EntityPair,
            ..Self::triple(id, source, subject, relation, object)
        }
    }

    /// Checks that exactly the fields belonging to `kind` are populated.
    pub fn shape_is_valid(&self) -> bool {
        let filled = |s: &str| !s.trim().is_empty();
        match self.kind {
            UnitKind::Triple | UnitKind::EntityPair => {
                filled(&self.subject)
                    && filled(&self.relation)
                    && filled(&self.object)
                    && self.statement.is_empty()
            }
            UnitKind::AtomicStatement => {
                filled(&self.statement)
                    && self.subject.is_empty()
                    && self.relation.is_empty()
                    && self.object.is_empty()
            }
        }
    }

    /// Surface text used for embedding.
    pub fn render(&self) -> String {
        match self.kind {
            UnitKind::AtomicStatement => self.statement.clone(),
            UnitKind::Triple | UnitKind::EntityPair => {
                format!("{} {} {}", self.subject, self.relation, self.object)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Contains,
    References,
    DerivedFrom,
    TaggedWith,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from_node: NodeRef,
    pub to_node: NodeRef,
    pub relation: EdgeKind,
}

impl Edge {
    pub fn new(from_node: NodeRef, to_node: NodeRef, relation: EdgeKind) -> Self {
        Self {
            from_node,
            to_node,
            relation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    ProposalsEmpty,
    NoCandidates,
    SelectionNone,
    BudgetExhausted,
    Answered,
}

/// Evolving state of one knowledge-aware decomposition run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveState {
    pub question: String,
    /// Context chunk ids in insertion order; never contains duplicates.
    pub context: Vec<ChunkId>,
    pub chosen_atomics: Vec<AtomicId>,
    pub iteration: u32,
    pub terminated: bool,
    pub termination_reason: Option<TerminationReason>,
}

impl SolveState {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            context: Vec::new(),
            chosen_atomics: Vec::new(),
            iteration: 0,
            terminated: false,
            termination_reason: None,
        }
    }

    pub fn terminate(&mut self, reason: TerminationReason) {
        self.terminated = true;
        self.termination_reason = Some(reason);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub sub_question: String,
    pub sub_answer: String,
}

impl TrajectoryStep {
    pub fn new(sub_question: impl Into<String>, sub_answer: impl Into<String>) -> Self {
        Self {
            sub_question: sub_question.into(),
            sub_answer: sub_answer.into(),
        }
    }
}

/// A recorded decomposition path `(q, [(q1, a1) .. (qt, at)], a)` with its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub steps: Vec<TrajectoryStep>,
    pub final_answer: String,
    pub score: f64,
}
