//! The three-layer heterogeneous knowledge graph and its vector indexes.
//!
//! Layers:
//! - information resources: [`DocumentNode`]s
//! - corpus: [`Chunk`]s plus the [`AtomicQuestion`]s that index them
//! - distilled knowledge: [`KnowledgeUnit`]s
//!
//! Nodes are linked only through explicit [`Edge`]s. Every embedded node has
//! a unit-normalized vector in the matching per-layer [`VectorIndex`].

pub mod archive;
pub mod index;
mod integrity;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Arc, RwLock};

use thiserror::Error;

pub use archive::{load, save, ArchiveError, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use index::{cosine_similarity, dot, normalize, VectorError, VectorIndex};
pub use integrity::validate_kb_integrity;

use crate::model::{
    AtomicId, AtomicQuestion, Chunk, ChunkId, DocumentId, DocumentNode, Edge, EdgeKind, IdGen,
    KnowledgeUnit, NodeRef, UnitId,
};

/// Metadata key listing source URIs (comma separated) a document refers to.
pub const REFERENCES_KEY: &str = "references";

#[derive(Debug, Error, PartialEq)]
pub enum KbError {
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("vector for {node}: {source}")]
    Vector {
        node: NodeRef,
        #[source]
        source: VectorError,
    },
    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),
}

/// Everything needed to (re)place one document and its descendants.
#[derive(Debug, Clone)]
pub struct DocumentUpsert {
    pub document: DocumentNode,
    /// Embedding of the document descriptor (title + metadata); optional.
    pub embedding: Option<Vec<f64>>,
    pub chunks: Vec<Chunk>,
    pub atomics: Vec<AtomicQuestion>,
    /// Units with an empty embedding are stored but not indexed.
    pub units: Vec<KnowledgeUnit>,
}

/// Raw table form of a knowledge base, used by persistence and by tests that
/// need to build graphs the upsert path would refuse.
#[derive(Debug, Clone, Default)]
pub struct KbParts {
    pub embedding_dim: usize,
    pub next_id: u64,
    pub documents: Vec<DocumentNode>,
    pub document_vectors: BTreeMap<DocumentId, Vec<f64>>,
    pub chunks: Vec<Chunk>,
    pub atomics: Vec<AtomicQuestion>,
    pub units: Vec<KnowledgeUnit>,
    pub edges: Vec<Edge>,
}

#[derive(Debug)]
pub struct LayeredKnowledgeBase {
    embedding_dim: usize,
    ids: IdGen,
    documents: BTreeMap<DocumentId, DocumentNode>,
    chunks: BTreeMap<ChunkId, Chunk>,
    atomics: BTreeMap<AtomicId, AtomicQuestion>,
    units: BTreeMap<UnitId, KnowledgeUnit>,
    edges: BTreeSet<Edge>,
    document_index: VectorIndex<DocumentId>,
    chunk_index: VectorIndex<ChunkId>,
    atomic_index: VectorIndex<AtomicId>,
    unit_index: VectorIndex<UnitId>,
    chunks_by_doc: BTreeMap<DocumentId, Vec<ChunkId>>,
    atomics_by_chunk: BTreeMap<ChunkId, Vec<AtomicId>>,
    units_by_chunk: BTreeMap<ChunkId, Vec<UnitId>>,
}

impl Clone for LayeredKnowledgeBase {
    fn clone(&self) -> Self {
        Self {
            embedding_dim: self.embedding_dim,
            ids: IdGen::starting_at(self.ids.peek()),
            documents: self.documents.clone(),
            chunks: self.chunks.clone(),
            atomics: self.atomics.clone(),
            units: self.units.clone(),
            edges: self.edges.clone(),
            document_index: self.document_index.clone(),
            chunk_index: self.chunk_index.clone(),
            atomic_index: self.atomic_index.clone(),
            unit_index: self.unit_index.clone(),
            chunks_by_doc: self.chunks_by_doc.clone(),
            atomics_by_chunk: self.atomics_by_chunk.clone(),
            units_by_chunk: self.units_by_chunk.clone(),
        }
    }
}

impl LayeredKnowledgeBase {
    pub fn new(embedding_dim: usize) -> Self {
        assert!(embedding_dim > 0, "embedding dimension must be positive");
        Self {
            embedding_dim,
            ids: IdGen::default(),
            documents: BTreeMap::new(),
            chunks: BTreeMap::new(),
            atomics: BTreeMap::new(),
            units: BTreeMap::new(),
            edges: BTreeSet::new(),
            document_index: VectorIndex::new(embedding_dim),
            chunk_index: VectorIndex::new(embedding_dim),
            atomic_index: VectorIndex::new(embedding_dim),
            unit_index: VectorIndex::new(embedding_dim),
            chunks_by_doc: BTreeMap::new(),
            atomics_by_chunk: BTreeMap::new(),
            units_by_chunk: BTreeMap::new(),
        }
    }

    /// Assembles a knowledge base from raw tables without validating them.
    /// Vectors are normalized; ones of the wrong dimension are left out of
    /// the indexes (and reported by [`validate_kb_integrity`]).
    pub fn from_parts_unchecked(parts: KbParts) -> Self {
        let mut kb = Self::new(parts.embedding_dim.max(1));
        kb.embedding_dim = parts.embedding_dim;
        kb.ids = IdGen::starting_at(parts.next_id);
        for doc in parts.documents {
            kb.documents.insert(doc.id, doc);
        }
        for (id, v) in parts.document_vectors {
            let _ = kb.document_index.upsert(id, &v);
        }
        for mut chunk in parts.chunks {
            if let Ok(unit) = normalize(&chunk.embedding) {
                if kb.chunk_index.upsert(chunk.id, &unit).is_ok() {
                    chunk.embedding = unit;
                }
            }
            kb.chunks.insert(chunk.id, chunk);
        }
        for mut atomic in parts.atomics {
            if let Ok(unit) = normalize(&atomic.embedding) {
                if kb.atomic_index.upsert(atomic.id, &unit).is_ok() {
                    atomic.embedding = unit;
                }
            }
            kb.atomics.insert(atomic.id, atomic);
        }
        for mut unit in parts.units {
            if let Ok(v) = normalize(&unit.embedding) {
                if kb.unit_index.upsert(unit.id, &v).is_ok() {
                    unit.embedding = v;
                }
            }
            kb.units.insert(unit.id, unit);
        }
        kb.edges = parts.edges.into_iter().collect();
        kb.rebuild_adjacency();
        kb
    }

    pub fn to_parts(&self) -> KbParts {
        KbParts {
            embedding_dim: self.embedding_dim,
            next_id: self.ids.peek(),
            documents: self.documents.values().cloned().collect(),
            document_vectors: self
                .document_index
                .iter()
                .map(|(id, v)| (id, v.to_vec()))
                .collect(),
            chunks: self.chunks.values().cloned().collect(),
            atomics: self.atomics.values().cloned().collect(),
            units: self.units.values().cloned().collect(),
            edges: self.edges.iter().copied().collect(),
        }
    }

    fn rebuild_adjacency(&mut self) {
        self.chunks_by_doc.clear();
        self.atomics_by_chunk.clear();
        self.units_by_chunk.clear();
        for chunk in self.chunks.values() {
            self.chunks_by_doc
                .entry(chunk.document_id)
                .or_default()
                .push(chunk.id);
        }
        for ids in self.chunks_by_doc.values_mut() {
            ids.sort_by_key(|id| self.chunks[id].ordinal);
        }
        for a in self.atomics.values() {
            self.atomics_by_chunk.entry(a.chunk_id).or_default().push(a.id);
        }
        for u in self.units.values() {
            self.units_by_chunk
                .entry(u.source_chunk_id)
                .or_default()
                .push(u.id);
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn ids(&self) -> &IdGen {
        &self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> impl Iterator<Item = &DocumentNode> {
        self.documents.values()
    }
    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }
    pub fn atomics(&self) -> impl Iterator<Item = &AtomicQuestion> {
        self.atomics.values()
    }
    pub fn units(&self) -> impl Iterator<Item = &KnowledgeUnit> {
        self.units.values()
    }
    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn document(&self, id: DocumentId) -> Option<&DocumentNode> {
        self.documents.get(&id)
    }
    pub fn chunk(&self, id: ChunkId) -> Option<&Chunk> {
        self.chunks.get(&id)
    }
    pub fn atomic(&self, id: AtomicId) -> Option<&AtomicQuestion> {
        self.atomics.get(&id)
    }
    pub fn unit(&self, id: UnitId) -> Option<&KnowledgeUnit> {
        self.units.get(&id)
    }

    pub fn document_by_uri(&self, uri: &str) -> Option<&DocumentNode> {
        self.documents.values().find(|d| d.source_uri == uri)
    }

    /// Chunks of a document in ordinal order.
    pub fn chunks_of(&self, doc: DocumentId) -> &[ChunkId] {
        self.chunks_by_doc.get(&doc).map_or(&[], Vec::as_slice)
    }
    pub fn atomics_of(&self, chunk: ChunkId) -> &[AtomicId] {
        self.atomics_by_chunk.get(&chunk).map_or(&[], Vec::as_slice)
    }
    pub fn units_of(&self, chunk: ChunkId) -> &[UnitId] {
        self.units_by_chunk.get(&chunk).map_or(&[], Vec::as_slice)
    }

    pub fn document_index(&self) -> &VectorIndex<DocumentId> {
        &self.document_index
    }
    pub fn chunk_index(&self) -> &VectorIndex<ChunkId> {
        &self.chunk_index
    }
    pub fn atomic_index(&self) -> &VectorIndex<AtomicId> {
        &self.atomic_index
    }
    pub fn unit_index(&self) -> &VectorIndex<UnitId> {
        &self.unit_index
    }

    pub fn counts(&self) -> KbCounts {
        KbCounts {
            documents: self.documents.len(),
            chunks: self.chunks.len(),
            atomics: self.atomics.len(),
            units: self.units.len(),
            edges: self.edges.len(),
        }
    }

    fn check_vector(&self, node: NodeRef, v: &[f64]) -> Result<Vec<f64>, KbError> {
        if v.len() != self.embedding_dim {
            return Err(KbError::Vector {
                node,
                source: VectorError::DimensionMismatch {
                    expected: self.embedding_dim,
                    actual: v.len(),
                },
            });
        }
        normalize(v).map_err(|source| KbError::Vector { node, source })
    }

    fn validate_upsert(&self, up: &DocumentUpsert) -> Result<(), KbError> {
        let doc = &up.document;
        let fail = |msg: String| Err(KbError::Integrity(msg));
        if doc.source_uri.trim().is_empty() {
            return fail(format!("{} has an empty source_uri", doc.id));
        }
        if let Some(existing) = self.document_by_uri(&doc.source_uri) {
            if existing.id != doc.id {
                return fail(format!(
                    "source_uri {:?} already belongs to {}",
                    doc.source_uri, existing.id
                ));
            }
        }
        let owned_elsewhere = |node: NodeRef| -> bool {
            match node {
                NodeRef::Chunk(id) => self
                    .chunks
                    .get(&id)
                    .is_some_and(|c| c.document_id != doc.id),
                NodeRef::Atomic(id) => self.atomics.get(&id).is_some_and(|a| {
                    self.chunks
                        .get(&a.chunk_id)
                        .is_none_or(|c| c.document_id != doc.id)
                }),
                NodeRef::Unit(id) => self.units.get(&id).is_some_and(|u| {
                    self.chunks
                        .get(&u.source_chunk_id)
                        .is_none_or(|c| c.document_id != doc.id)
                }),
                NodeRef::Document(_) => false,
            }
        };

        let mut chunk_ids = HashSet::new();
        let mut ordinals: Vec<u32> = Vec::with_capacity(up.chunks.len());
        for chunk in &up.chunks {
            if chunk.document_id != doc.id {
                return fail(format!(
                    "{} references {} instead of {}",
                    chunk.id, chunk.document_id, doc.id
                ));
            }
            if chunk.text.is_empty() {
                return fail(format!("{} has empty text", chunk.id));
            }
            if !chunk_ids.insert(chunk.id) || owned_elsewhere(NodeRef::Chunk(chunk.id)) {
                return fail(format!("duplicate chunk id {}", chunk.id));
            }
            if chunk.tags.iter().any(|t| !t.is_valid()) {
                return fail(format!("{} carries an empty tag", chunk.id));
            }
            self.check_vector(NodeRef::Chunk(chunk.id), &chunk.embedding)?;
            ordinals.push(chunk.ordinal);
        }
        ordinals.sort_unstable();
        if ordinals.iter().enumerate().any(|(i, &o)| o as usize != i) {
            return fail(format!("chunk ordinals of {} are not gapless from 0", doc.id));
        }

        let mut atomic_ids = HashSet::new();
        for a in &up.atomics {
            if !chunk_ids.contains(&a.chunk_id) {
                return fail(format!(
                    "{} references chunk {} outside {}",
                    a.id, a.chunk_id, doc.id
                ));
            }
            if a.question_text.trim().is_empty() {
                return fail(format!("{} has empty question text", a.id));
            }
            if !atomic_ids.insert(a.id) || owned_elsewhere(NodeRef::Atomic(a.id)) {
                return fail(format!("duplicate atomic id {}", a.id));
            }
            self.check_vector(NodeRef::Atomic(a.id), &a.embedding)?;
        }

        let mut unit_ids = HashSet::new();
        for u in &up.units {
            if !chunk_ids.contains(&u.source_chunk_id) {
                return fail(format!(
                    "{} references chunk {} outside {}",
                    u.id, u.source_chunk_id, doc.id
                ));
            }
            if !u.shape_is_valid() {
                return fail(format!("{} fields do not match kind {:?}", u.id, u.kind));
            }
            if !unit_ids.insert(u.id) || owned_elsewhere(NodeRef::Unit(u.id)) {
                return fail(format!("duplicate unit id {}", u.id));
            }
            if !u.embedding.is_empty() {
                self.check_vector(NodeRef::Unit(u.id), &u.embedding)?;
            }
        }
        if let Some(v) = &up.embedding {
            self.check_vector(NodeRef::Document(doc.id), v)?;
        }
        Ok(())
    }

    /// Replaces everything stored under `up.document.id` with the given
    /// content. On an integrity violation nothing is modified.
    pub fn upsert_document(&mut self, up: DocumentUpsert) -> Result<(), KbError> {
        self.validate_upsert(&up)?;
        let doc_id = up.document.id;
        self.remove_document(doc_id);

        let mut max_id = doc_id.0;
        if let Some(v) = &up.embedding {
            self.document_index
                .upsert(doc_id, v)
                .expect("validated document vector");
        }
        self.documents.insert(doc_id, up.document);
        for mut chunk in up.chunks {
            max_id = max_id.max(chunk.id.0);
            chunk.embedding = normalize(&chunk.embedding).expect("validated chunk vector");
            self.chunk_index
                .upsert(chunk.id, &chunk.embedding)
                .expect("validated chunk vector");
            self.edges.insert(Edge::new(
                NodeRef::Document(doc_id),
                NodeRef::Chunk(chunk.id),
                EdgeKind::Contains,
            ));
            self.chunks.insert(chunk.id, chunk);
        }
        for mut a in up.atomics {
            max_id = max_id.max(a.id.0);
            a.embedding = normalize(&a.embedding).expect("validated atomic vector");
            self.atomic_index
                .upsert(a.id, &a.embedding)
                .expect("validated atomic vector");
            self.edges.insert(Edge::new(
                NodeRef::Chunk(a.chunk_id),
                NodeRef::Atomic(a.id),
                EdgeKind::Contains,
            ));
            self.atomics.insert(a.id, a);
        }
        for mut u in up.units {
            max_id = max_id.max(u.id.0);
            if !u.embedding.is_empty() {
                u.embedding = normalize(&u.embedding).expect("validated unit vector");
                self.unit_index
                    .upsert(u.id, &u.embedding)
                    .expect("validated unit vector");
            }
            self.edges.insert(Edge::new(
                NodeRef::Chunk(u.source_chunk_id),
                NodeRef::Unit(u.id),
                EdgeKind::Contains,
            ));
            self.units.insert(u.id, u);
        }
        self.ids.bump_past(max_id);
        self.rebuild_adjacency();
        self.rebuild_reference_edges();
        Ok(())
    }

    /// Removes a document and all of its descendants. Returns whether it existed.
    pub fn remove_document(&mut self, doc_id: DocumentId) -> bool {
        if self.documents.remove(&doc_id).is_none() {
            return false;
        }
        self.document_index.remove(&doc_id);
        let chunk_ids: Vec<ChunkId> = self.chunks_of(doc_id).to_vec();
        let mut gone: HashSet<NodeRef> = HashSet::new();
        gone.insert(NodeRef::Document(doc_id));
        for cid in chunk_ids {
            for aid in self.atomics_of(cid).to_vec() {
                self.atomics.remove(&aid);
                self.atomic_index.remove(&aid);
                gone.insert(NodeRef::Atomic(aid));
            }
            for uid in self.units_of(cid).to_vec() {
                self.units.remove(&uid);
                self.unit_index.remove(&uid);
                gone.insert(NodeRef::Unit(uid));
            }
            self.chunks.remove(&cid);
            self.chunk_index.remove(&cid);
            gone.insert(NodeRef::Chunk(cid));
        }
        self.edges
            .retain(|e| !gone.contains(&e.from_node) && !gone.contains(&e.to_node));
        self.rebuild_adjacency();
        true
    }

    /// Replaces (never appends to) the atomic-question set of one chunk.
    pub fn set_chunk_atomics(
        &mut self,
        chunk_id: ChunkId,
        atomics: Vec<AtomicQuestion>,
    ) -> Result<(), KbError> {
        if !self.chunks.contains_key(&chunk_id) {
            return Err(KbError::UnknownChunk(chunk_id));
        }
        let mut seen = HashSet::new();
        for a in &atomics {
            if a.chunk_id != chunk_id {
                return Err(KbError::Integrity(format!(
                    "{} references {} instead of {}",
                    a.id, a.chunk_id, chunk_id
                )));
            }
            if a.question_text.trim().is_empty() {
                return Err(KbError::Integrity(format!("{} has empty question text", a.id)));
            }
            let foreign = self
                .atomics
                .get(&a.id)
                .is_some_and(|old| old.chunk_id != chunk_id);
            if !seen.insert(a.id) || foreign {
                return Err(KbError::Integrity(format!("duplicate atomic id {}", a.id)));
            }
            self.check_vector(NodeRef::Atomic(a.id), &a.embedding)?;
        }
        for aid in self.atomics_of(chunk_id).to_vec() {
            self.atomics.remove(&aid);
            self.atomic_index.remove(&aid);
            self.edges.remove(&Edge::new(
                NodeRef::Chunk(chunk_id),
                NodeRef::Atomic(aid),
                EdgeKind::Contains,
            ));
        }
        for mut a in atomics {
            self.ids.bump_past(a.id.0);
            a.embedding = normalize(&a.embedding).expect("validated atomic vector");
            self.atomic_index
                .upsert(a.id, &a.embedding)
                .expect("validated atomic vector");
            self.edges.insert(Edge::new(
                NodeRef::Chunk(chunk_id),
                NodeRef::Atomic(a.id),
                EdgeKind::Contains,
            ));
            self.atomics.insert(a.id, a);
        }
        self.rebuild_adjacency();
        Ok(())
    }

    fn rebuild_reference_edges(&mut self) {
        self.edges.retain(|e| e.relation != EdgeKind::References);
        let by_uri: BTreeMap<&str, DocumentId> = self
            .documents
            .values()
            .map(|d| (d.source_uri.as_str(), d.id))
            .collect();
        let mut new_edges = Vec::new();
        for doc in self.documents.values() {
            let Some(refs) = doc.metadata.get(REFERENCES_KEY) else {
                continue;
            };
            for uri in refs.split(',').map(str::trim).filter(|u| !u.is_empty()) {
                if let Some(&target) = by_uri.get(uri) {
                    if target != doc.id {
                        new_edges.push(Edge::new(
                            NodeRef::Document(doc.id),
                            NodeRef::Document(target),
                            EdgeKind::References,
                        ));
                    }
                }
            }
        }
        self.edges.extend(new_edges);
    }

    /// Structural equality under ids, including edges and vector bits.
    pub fn same_content(&self, other: &Self) -> bool {
        let a = self.to_parts();
        let b = other.to_parts();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        a.embedding_dim == b.embedding_dim
            && a.documents == b.documents
            && a.chunks == b.chunks
            && a.atomics == b.atomics
            && a.units == b.units
            && a.edges == b.edges
            && a.chunks.iter().zip(&b.chunks).all(|(x, y)| bits(&x.embedding) == bits(&y.embedding))
            && a.atomics.iter().zip(&b.atomics).all(|(x, y)| bits(&x.embedding) == bits(&y.embedding))
            && a.units.iter().zip(&b.units).all(|(x, y)| bits(&x.embedding) == bits(&y.embedding))
            && a.document_vectors.len() == b.document_vectors.len()
            && a
                .document_vectors
                .iter()
                .zip(&b.document_vectors)
                .all(|((ka, va), (kb, vb))| ka == kb && bits(va) == bits(vb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct KbCounts {
    pub documents: usize,
    pub chunks: usize,
    pub atomics: usize,
    pub units: usize,
    pub edges: usize,
}

/// Reader-writer wrapper handing out immutable snapshots.
#[derive(Debug, Clone, Default)]
pub struct KbStore {
    inner: Arc<RwLock<Option<Arc<LayeredKnowledgeBase>>>>,
}

impl KbStore {
    pub fn new(kb: LayeredKnowledgeBase) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Some(Arc::new(kb)))),
        }
    }

    pub fn snapshot(&self) -> Option<Arc<LayeredKnowledgeBase>> {
        self.inner.read().expect("kb lock poisoned").clone()
    }

    /// Runs `f` against a private copy and publishes it only if `f` succeeds.
    pub fn write<T, E>(
        &self,
        f: impl FnOnce(&mut LayeredKnowledgeBase) -> Result<T, E>,
    ) -> Option<Result<T, E>> {
        let mut guard = self.inner.write().expect("kb lock poisoned");
        let current = guard.as_ref()?;
        let mut next = LayeredKnowledgeBase::clone(current);
        let out = f(&mut next);
        if out.is_ok() {
            *guard = Some(Arc::new(next));
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KnowledgeUnit, Tag};

    fn vec_for(seed: u64, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|i| ((seed * 31 + i as u64 * 17) % 11) as f64 - 5.0 + 0.5)
            .collect()
    }

    fn bundle(kb: &LayeredKnowledgeBase, uri: &str, n_chunks: usize, doc: Option<DocumentId>) -> DocumentUpsert {
        let ids = kb.ids();
        let doc_id = doc.unwrap_or_else(|| ids.document());
        let mut chunks = Vec::new();
        let mut atomics = Vec::new();
        let mut units = Vec::new();
        for i in 0..n_chunks {
            let cid = ids.chunk();
            chunks.push(Chunk {
                id: cid,
                document_id: doc_id,
                ordinal: i as u32,
                text: format!("chunk {i} of {uri}"),
                forward_summary: String::new(),
                embedding: vec_for(cid.0, 4),
                tags: vec![Tag::new("kind", "test")],
            });
            let aid = ids.atomic();
            atomics.push(AtomicQuestion {
                id: aid,
                chunk_id: cid,
                question_text: format!("What is chunk {i}?"),
                embedding: vec_for(aid.0, 4),
            });
            let mut u = KnowledgeUnit::triple(ids.unit(), cid, "a", "b", "c");
            u.embedding = vec_for(u.id.0, 4);
            units.push(u);
        }
        DocumentUpsert {
            document: DocumentNode {
                id: doc_id,
                source_uri: uri.into(),
                title: uri.into(),
                metadata: Default::default(),
            },
            embedding: Some(vec_for(doc_id.0, 4)),
            chunks,
            atomics,
            units,
        }
    }

    #[test]
    fn insert_into_empty_kb() {
        let mut kb = LayeredKnowledgeBase::new(4);
        let up = bundle(&kb, "a.txt", 2, None);
        kb.upsert_document(up).unwrap();
        assert_eq!(kb.counts().documents, 1);
        assert_eq!(kb.counts().chunks, 2);
        assert!(validate_kb_integrity(&kb).is_empty());
    }

    #[test]
    fn reinsert_with_fewer_chunks_drops_stale_nodes() {
        let mut kb = LayeredKnowledgeBase::new(4);
        let up = bundle(&kb, "a.txt", 3, None);
        let doc_id = up.document.id;
        let old_chunks: Vec<ChunkId> = up.chunks.iter().map(|c| c.id).collect();
        kb.upsert_document(up).unwrap();
        let up2 = bundle(&kb, "a.txt", 1, Some(doc_id));
        kb.upsert_document(up2).unwrap();
        assert_eq!(kb.counts().chunks, 1);
        assert_eq!(kb.counts().atomics, 1);
        for c in old_chunks {
            assert!(kb.chunk(c).is_none());
            assert!(kb.atomics_of(c).is_empty());
            assert!(!kb.chunk_index().contains(&c));
        }
        assert!(validate_kb_integrity(&kb).is_empty());
    }

    #[test]
    fn foreign_chunk_reference_is_rejected_atomically() {
        let mut kb = LayeredKnowledgeBase::new(4);
        kb.upsert_document(bundle(&kb, "a.txt", 1, None)).unwrap();
        let before = kb.clone();
        let mut up = bundle(&kb, "b.txt", 1, None);
        let foreign = kb.chunks().next().unwrap().id;
        up.atomics[0].chunk_id = foreign;
        let err = kb.upsert_document(up).unwrap_err();
        assert!(matches!(err, KbError::Integrity(_)));
        assert!(kb.same_content(&before));
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let mut kb = LayeredKnowledgeBase::new(4);
        let mut up = bundle(&kb, "a.txt", 1, None);
        up.chunks[0].embedding = vec![1.0; 3];
        assert!(matches!(
            kb.upsert_document(up),
            Err(KbError::Vector { .. })
        ));
        assert!(kb.is_empty());
    }

    #[test]
    fn set_chunk_atomics_replaces() {
        let mut kb = LayeredKnowledgeBase::new(4);
        kb.upsert_document(bundle(&kb, "a.txt", 1, None)).unwrap();
        let cid = kb.chunks().next().unwrap().id;
        let make = |kb: &LayeredKnowledgeBase, n: usize| -> Vec<AtomicQuestion> {
            (0..n)
                .map(|i| AtomicQuestion {
                    id: kb.ids().atomic(),
                    chunk_id: cid,
                    question_text: format!("Q{i}?"),
                    embedding: vec_for(i as u64 + 3, 4),
                })
                .collect()
        };
        let first = make(&kb, 3);
        kb.set_chunk_atomics(cid, first).unwrap();
        assert_eq!(kb.atomics_of(cid).len(), 3);
        let second = make(&kb, 2);
        kb.set_chunk_atomics(cid, second).unwrap();
        assert_eq!(kb.atomics_of(cid).len(), 2);
        assert_eq!(kb.atomic_index().len(), 2);
        assert!(validate_kb_integrity(&kb).is_empty());
    }

    #[test]
    fn reference_edges_follow_metadata() {
        let mut kb = LayeredKnowledgeBase::new(4);
        let mut a = bundle(&kb, "a.txt", 1, None);
        a.document
            .metadata
            .insert(REFERENCES_KEY.into(), "b.txt, missing.txt".into());
        kb.upsert_document(a).unwrap();
        assert_eq!(
            kb.edges().filter(|e| e.relation == EdgeKind::References).count(),
            0
        );
        kb.upsert_document(bundle(&kb, "b.txt", 1, None)).unwrap();
        assert_eq!(
            kb.edges().filter(|e| e.relation == EdgeKind::References).count(),
            1
        );
    }

    #[test]
    fn store_snapshots_are_isolated_from_failed_writes() {
        let kb = LayeredKnowledgeBase::new(4);
        let store = KbStore::new(kb);
        let snap = store.snapshot().unwrap();
        let res = store
            .write(|kb| {
                let up = bundle(kb, "a.txt", 1, None);
                kb.upsert_document(up)?;
                Err::<(), KbError>(KbError::Integrity("abort".into()))
            })
            .unwrap();
        assert!(res.is_err());
        assert!(store.snapshot().unwrap().is_empty());
        store
            .write(|kb| {
                let up = bundle(kb, "a.txt", 1, None);
                kb.upsert_document(up)
            })
            .unwrap()
            .unwrap();
        assert!(snap.is_empty());
        assert_eq!(store.snapshot().unwrap().counts().documents, 1);
    }
}
