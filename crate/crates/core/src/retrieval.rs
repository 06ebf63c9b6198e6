//! Flat, hierarchical (chunk + atomic-question paths) and multi-layer
//! retrieval over a [`LayeredKnowledgeBase`].
//!
//! Every strategy has a `*_from_vector` form taking a query embedding, so the
//! scoring rules can be checked without an embedder.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, GatewayError};
use crate::kb::{normalize, LayeredKnowledgeBase, VectorError};
use crate::model::{ChunkId, NodeRef, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub chunk: f64,
    pub atomic: f64,
    pub distilled: f64,
    pub document: f64,
}

impl Default for LayerWeights {
    fn default() -> Self {
        Self {
            chunk: 1.0,
            atomic: 0.8,
            distilled: 0.5,
            document: 0.25,
        }
    }
}

impl LayerWeights {
    pub const FLAT: LayerWeights = LayerWeights {
        chunk: 1.0,
        atomic: 0.0,
        distilled: 0.0,
        document: 0.0,
    };

    fn as_array(&self) -> [f64; 4] {
        [self.chunk, self.atomic, self.distilled, self.document]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub flat_k: usize,
    pub flat_threshold: f64,
    pub hier_chunk_k: usize,
    pub hier_chunk_threshold: f64,
    pub hier_atomic_k: usize,
    /// Atomic candidates kept per proposal during decomposition.
    pub atomic_select_k: usize,
    /// Minimum proposal-to-atomic similarity during decomposition; also the
    /// threshold of the atomic path in hierarchical retrieval.
    pub atomic_threshold: f64,
    /// The union of candidates shown to the selector is capped at
    /// `candidate_cap_factor * atomic_select_k`.
    pub candidate_cap_factor: usize,
    pub layer_weights: LayerWeights,
    /// Added to a chunk's score when it carries one of the query tags.
    pub tag_bonus: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            flat_k: 16,
            flat_threshold: 0.2,
            hier_chunk_k: 8,
            hier_chunk_threshold: 0.5,
            hier_atomic_k: 4,
            atomic_select_k: 4,
            atomic_threshold: 0.5,
            candidate_cap_factor: 2,
            layer_weights: LayerWeights::default(),
            tag_bonus: 0.05,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: String| Err(RetrievalError::InvalidConfig(m));
        for (name, k) in [
            ("flat_k", self.flat_k),
            ("hier_chunk_k", self.hier_chunk_k),
            ("hier_atomic_k", self.hier_atomic_k),
            ("atomic_select_k", self.atomic_select_k),
            ("candidate_cap_factor", self.candidate_cap_factor),
        ] {
            if k == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, t) in [
            ("flat_threshold", self.flat_threshold),
            ("hier_chunk_threshold", self.hier_chunk_threshold),
            ("atomic_threshold", self.atomic_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} must lie in [0, 1], got {t}"));
            }
        }
        let w = self.layer_weights.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("layer weights must be finite and non-negative".into());
        }
        if w.iter().all(|x| *x == 0.0) {
            return bad("at least one layer weight must be positive".into());
        }
        if !self.tag_bonus.is_finite() || self.tag_bonus < 0.0 {
            return bad("tag_bonus must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn candidate_cap(&self) -> usize {
        self.atomic_select_k * self.candidate_cap_factor
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("query embedding failed: {0}")]
    Embedding(#[from] GatewayError),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    ViaAtomic,
    ViaDistilled,
    ViaDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: ChunkId,
    pub score: f64,
    pub provenance: Provenance,
    /// The non-chunk node that produced the score, when there is one.
    pub matched_node: Option<NodeRef>,
}

impl ScoredChunk {
    fn direct(chunk_id: ChunkId, score: f64) -> Self {
        Self {
            chunk_id,
            score,
            provenance: Provenance::Direct,
            matched_node: None,
        }
    }
}

fn sort_ranked(hits: &mut [ScoredChunk]) {
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
}

pub fn embed_query(embedder: &dyn Embedder, query: &str) -> Result<Vec<f64>, RetrievalError> {
    Ok(embedder.embed_one(query)?)
}

/// Top `k` chunks by cosine similarity with score `>= threshold`.
pub fn flat_from_vector(
    kb: &LayeredKnowledgeBase,
    query: &[f64],
    k: usize,
    threshold: f64,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    Ok(kb
        .chunk_index()
        .nearest(query, k, threshold)?
        .into_iter()
        .map(|(id, s)| ScoredChunk::direct(id, s))
        .collect())
}

pub fn retrieve_flat(
    kb: &LayeredKnowledgeBase,
    query: &str,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    cfg.validate()?;
    let q = embed_query(embedder, query)?;
    flat_from_vector(kb, &q, cfg.flat_k, cfg.flat_threshold)
}

/// Union of the direct chunk path and the atomic-question path. A chunk
/// reached both ways keeps its higher score; on equal scores the direct hit
/// wins.
pub fn hierarchical_from_vector(
    kb: &LayeredKnowledgeBase,
    query: &[f64],
    cfg: &RetrievalConfig,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    let direct = flat_from_vector(kb, query, cfg.hier_chunk_k, cfg.hier_chunk_threshold)?;
    let mut merged: HashMap<ChunkId, ScoredChunk> =
        direct.into_iter().map(|h| (h.chunk_id, h)).collect();
    let atomic_hits = kb
        .atomic_index()
        .nearest(query, cfg.hier_atomic_k, cfg.atomic_threshold)?;
    for (aid, score) in atomic_hits {
        let Some(atomic) = kb.atomic(aid) else {
            continue;
        };
        let hit = ScoredChunk {
            chunk_id: atomic.chunk_id,
            score,
            provenance: Provenance::ViaAtomic,
            matched_node: Some(NodeRef::Atomic(aid)),
        };
        match merged.get(&atomic.chunk_id) {
            Some(existing) if existing.score >= score => {}
            _ => {
                merged.insert(atomic.chunk_id, hit);
            }
        }
    }
    let mut out: Vec<ScoredChunk> = merged.into_values().collect();
    sort_ranked(&mut out);
    Ok(out)
}

pub fn retrieve_hierarchical(
    kb: &LayeredKnowledgeBase,
    query: &str,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    cfg.validate()?;
    let q = embed_query(embedder, query)?;
    hierarchical_from_vector(kb, &q, cfg)
}

/// Per-layer similarity of a chunk to the query, with the best node of each
/// non-chunk layer. `None` means the layer has nothing for this chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScores {
    pub chunk: f64,
    pub atomic: Option<(f64, NodeRef)>,
    pub distilled: Option<(f64, NodeRef)>,
    pub document: Option<(f64, NodeRef)>,
}

impl LayerScores {
    /// Weighted sum plus the provenance of the largest weighted term.
    /// Zero-weight layers are skipped entirely.
    pub fn combine(&self, w: &LayerWeights) -> (f64, Provenance, Option<NodeRef>) {
        let terms = [
            (w.chunk, Some((self.chunk, None)), Provenance::Direct),
            (w.atomic, self.atomic.map(|(s, n)| (s, Some(n))), Provenance::ViaAtomic),
            (w.distilled, self.distilled.map(|(s, n)| (s, Some(n))), Provenance::ViaDistilled),
            (w.document, self.document.map(|(s, n)| (s, Some(n))), Provenance::ViaDocument),
        ];
        let mut total = 0.0;
        let mut best: Option<(f64, Provenance, Option<NodeRef>)> = None;
        for (weight, term, prov) in terms {
            if weight == 0.0 {
                continue;
            }
            let Some((score, node)) = term else {
                continue;
            };
            let contribution = weight * score;
            total += contribution;
            if best.is_none_or(|(b, _, _)| contribution > b) {
                best = Some((contribution, prov, node));
            }
        }
        let (_, prov, node) = best.unwrap_or((0.0, Provenance::Direct, None));
        (total, prov, node)
    }
}

fn best_of<K: Copy + std::hash::Hash + Eq + Ord>(
    ids: impl IntoIterator<Item = K>,
    scores: &HashMap<K, f64>,
) -> Option<(f64, K)> {
    let mut best: Option<(f64, K)> = None;
    for id in ids {
        if let Some(&s) = scores.get(&id) {
            match best {
                Some((b, bid)) if b > s || (b == s && bid < id) => {}
                _ => best = Some((s, id)),
            }
        }
    }
    best
}

/// Layer scores for every chunk in the knowledge base.
pub fn layer_scores(
    kb: &LayeredKnowledgeBase,
    query: &[f64],
    weights: &LayerWeights,
) -> Result<Vec<(ChunkId, LayerScores)>, RetrievalError> {
    if query.len() != kb.embedding_dim() {
        return Err(VectorError::DimensionMismatch {
            expected: kb.embedding_dim(),
            actual: query.len(),
        }
        .into());
    }
    // Same normalization as the index's own nearest-neighbour path, so the
    // chunk term matches flat retrieval bit for bit.
    let q = normalize(query)?;
    let chunk_scores = kb.chunk_index().score_all(&q);
    let atomic_scores = if weights.atomic > 0.0 {
        kb.atomic_index().score_all(&q)
    } else {
        HashMap::new()
    };
    let unit_scores = if weights.distilled > 0.0 {
        kb.unit_index().score_all(&q)
    } else {
        HashMap::new()
    };
    let doc_scores = if weights.document > 0.0 {
        kb.document_index().score_all(&q)
    } else {
        HashMap::new()
    };
    let mut out = Vec::with_capacity(chunk_scores.len());
    for chunk in kb.chunks() {
        let Some(&g) = chunk_scores.get(&chunk.id) else {
            continue;
        };
        let atomic = best_of(kb.atomics_of(chunk.id).iter().copied(), &atomic_scores)
            .map(|(s, id)| (s, NodeRef::Atomic(id)));
        let distilled = best_of(kb.units_of(chunk.id).iter().copied(), &unit_scores)
            .map(|(s, id)| (s, NodeRef::Unit(id)));
        let document = doc_scores
            .get(&chunk.document_id)
            .map(|&s| (s, NodeRef::Document(chunk.document_id)));
        out.push((
            chunk.id,
            LayerScores {
                chunk: g,
                atomic,
                distilled,
                document,
            },
        ));
    }
    Ok(out)
}

/// Weighted multi-layer score for every chunk, optionally boosted by tag
/// matches, thresholded at `flat_threshold` and cut to `flat_k`.
pub fn multi_granularity_from_vector(
    kb: &LayeredKnowledgeBase,
    query: &[f64],
    cfg: &RetrievalConfig,
    query_tags: Option<&BTreeSet<Tag>>,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    let w = &cfg.layer_weights;
    let mut hits = Vec::new();
    for (chunk_id, scores) in layer_scores(kb, query, w)? {
        let (mut score, provenance, matched_node) = scores.combine(w);
        if let Some(tags) = query_tags {
            let chunk = kb.chunk(chunk_id).expect("scored chunk exists");
            if chunk.tags.iter().any(|t| tags.contains(t)) {
                score += cfg.tag_bonus;
            }
        }
        if score >= cfg.flat_threshold {
            hits.push(ScoredChunk {
                chunk_id,
                score,
                provenance,
                matched_node,
            });
        }
    }
    sort_ranked(&mut hits);
    hits.truncate(cfg.flat_k);
    Ok(hits)
}

pub fn retrieve_multi_granularity(
    kb: &LayeredKnowledgeBase,
    query: &str,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    cfg.validate()?;
    let q = embed_query(embedder, query)?;
    multi_granularity_from_vector(kb, &q, cfg, None)
}

/// Multi-layer retrieval with the tag bonus for chunks carrying any of
/// `query_tags` (already mapped into the corpus tag vocabulary).
pub fn retrieve_tagged(
    kb: &LayeredKnowledgeBase,
    query: &str,
    query_tags: &BTreeSet<Tag>,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    cfg.validate()?;
    let q = embed_query(embedder, query)?;
    multi_granularity_from_vector(kb, &q, cfg, Some(query_tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{cosine_similarity, DocumentUpsert};
    use crate::model::{AtomicId, AtomicQuestion, Chunk, DocumentId, DocumentNode, KnowledgeUnit, UnitId};

    /// One document per entry of `chunks`; each chunk carries its atomics and
    /// units. Document descriptors get `doc_vec` when given.
    /// Chunk vector, atomic vectors, unit vectors, document vector.
    type FixtureChunk = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<f64>>);

    struct Fixture {
        chunks: Vec<FixtureChunk>,
    }

    impl Fixture {
        fn build(self, dim: usize) -> LayeredKnowledgeBase {
            let mut kb = LayeredKnowledgeBase::new(dim);
            let mut next = 0u64;
            let mut id = || {
                next += 1;
                next
            };
            for (i, (cv, atomics, units, doc_vec)) in self.chunks.into_iter().enumerate() {
                let doc_id = DocumentId(id());
                let chunk_id = ChunkId(id());
                let up = DocumentUpsert {
                    document: DocumentNode {
                        id: doc_id,
                        source_uri: format!("mem://{i}"),
                        title: format!("d{i}"),
                        metadata: Default::default(),
                    },
                    embedding: doc_vec,
                    chunks: vec![Chunk {
                        id: chunk_id,
                        document_id: doc_id,
                        ordinal: 0,
                        text: format!("chunk {i}"),
                        forward_summary: String::new(),
                        embedding: cv,
                        tags: vec![],
                    }],
                    atomics: atomics
                        .into_iter()
                        .map(|v| AtomicQuestion {
                            id: AtomicId(id()),
                            chunk_id,
                            question_text: "q".into(),
                            embedding: v,
                        })
                        .collect(),
                    units: units
                        .into_iter()
                        .map(|v| {
                            let mut u = KnowledgeUnit::statement(UnitId(id()), chunk_id, "s");
                            u.embedding = v;
                            u
                        })
                        .collect(),
                };
                kb.upsert_document(up).unwrap();
            }
            kb
        }
    }

    fn plain(vs: &[[f64; 3]]) -> LayeredKnowledgeBase {
        Fixture {
            chunks: vs.iter().map(|v| (v.to_vec(), vec![], vec![], None)).collect(),
        }
        .build(3)
    }

    #[test]
    fn exact_match_ranks_first_with_score_one() {
        let kb = plain(&[[1.0, 0.0, 0.0], [0.6, 0.8, 0.0]]);
        let hits = flat_from_vector(&kb, &[2.0, 0.0, 0.0], 16, 0.2).unwrap();
        assert_eq!(hits[0].chunk_id, ChunkId(2));
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits[0].provenance, Provenance::Direct);
    }

    #[test]
    fn empty_kb_returns_nothing() {
        let kb = LayeredKnowledgeBase::new(3);
        assert!(flat_from_vector(&kb, &[1.0, 0.0, 0.0], 16, 0.0).unwrap().is_empty());
        let cfg = RetrievalConfig::default();
        assert!(hierarchical_from_vector(&kb, &[1.0, 0.0, 0.0], &cfg).unwrap().is_empty());
        assert!(multi_granularity_from_vector(&kb, &[1.0, 0.0, 0.0], &cfg, None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn flat_matches_brute_force_scan() {
        let vs = [
            [1.0, 0.2, 0.0],
            [0.1, 1.0, 0.3],
            [0.5, 0.5, 0.5],
            [-1.0, 0.0, 0.2],
            [0.9, 0.1, -0.4],
            [0.0, 0.0, 1.0],
        ];
        let kb = plain(&vs);
        let q = [0.7, 0.3, 0.1];
        let mut oracle: Vec<(usize, f64)> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| (i, cosine_similarity(&q, v).unwrap()))
            .filter(|(_, s)| *s >= 0.2)
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
        let hits = flat_from_vector(&kb, &q, 16, 0.2).unwrap();
        assert_eq!(hits.len(), oracle.len());
        for (h, (i, s)) in hits.iter().zip(oracle) {
            // Chunk ids are 2, 4, 6, ... in fixture order.
            assert_eq!(h.chunk_id, ChunkId(2 * i as u64 + 2));
            assert!((h.score - s).abs() < 1e-12);
        }
    }

    #[test]
    fn atomic_path_reaches_chunk_below_direct_threshold() {
        // Direct cosine 0.3 < 0.5; the atomic matches the query exactly.
        let kb = Fixture {
            chunks: vec![(vec![0.3, (1.0f64 - 0.09).sqrt(), 0.0], vec![vec![1.0, 0.0, 0.0]], vec![], None)],
        }
        .build(3);
        let cfg = RetrievalConfig::default();
        let q = [1.0, 0.0, 0.0];
        assert!(flat_from_vector(&kb, &q, 8, 0.5).unwrap().is_empty());
        let hits = hierarchical_from_vector(&kb, &q, &cfg).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].provenance, Provenance::ViaAtomic);
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits[0].matched_node, Some(NodeRef::Atomic(AtomicId(3))));
    }

    #[test]
    fn chunk_reachable_both_ways_appears_once_with_max() {
        let kb = Fixture {
            chunks: vec![(vec![1.0, 0.0, 0.0], vec![vec![0.8, 0.6, 0.0]], vec![], None)],
        }
        .build(3);
        let hits = hierarchical_from_vector(&kb, &[1.0, 0.0, 0.0], &RetrievalConfig::default()).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits[0].provenance, Provenance::Direct);
    }

    #[test]
    fn weighted_sum_matches_hand_computation() {
        let q = [1.0, 0.0, 0.0];
        let kb = Fixture {
            chunks: vec![(
                vec![0.6, 0.8, 0.0],
                vec![vec![0.8, 0.6, 0.0], vec![0.0, 1.0, 0.0]],
                vec![vec![0.0, 0.6, 0.8]],
                Some(vec![0.5, 0.0, (0.75f64).sqrt()]),
            )],
        }
        .build(3);
        let cfg = RetrievalConfig {
            flat_threshold: 0.0,
            ..RetrievalConfig::default()
        };
        let hits = multi_granularity_from_vector(&kb, &q, &cfg, None).unwrap();
        let expected = 1.0 * 0.6 + 0.8 * 0.8 + 0.5 * 0.0 + 0.25 * 0.5;
        assert!((hits[0].score - expected).abs() < 1e-9);
        assert_eq!(hits[0].provenance, Provenance::ViaAtomic);
    }

    #[test]
    fn distilled_layer_can_flip_order() {
        let q = [1.0, 0.0, 0.0];
        let kb = Fixture {
            chunks: vec![
                (vec![0.9, (0.19f64).sqrt(), 0.0], vec![], vec![], None),
                (vec![0.8, 0.6, 0.0], vec![], vec![vec![1.0, 0.0, 0.0]], None),
            ],
        }
        .build(3);
        let cfg = RetrievalConfig::default();
        let flat = flat_from_vector(&kb, &q, 16, 0.2).unwrap();
        assert_eq!(flat[0].chunk_id, ChunkId(2));
        let multi = multi_granularity_from_vector(&kb, &q, &cfg, None).unwrap();
        // 0.9 versus 0.8 + 0.5 * 1.0.
        assert_eq!(multi[0].chunk_id, ChunkId(4));
        assert!((multi[0].score - 1.3).abs() < 1e-9);
        assert!((multi[1].score - 0.9).abs() < 1e-9);
    }

    #[test]
    fn flat_weights_reproduce_flat_retrieval_exactly() {
        let kb = Fixture {
            chunks: vec![
                (vec![0.2, 0.9, 0.1], vec![vec![1.0, 0.0, 0.0]], vec![vec![1.0, 1.0, 0.0]], Some(vec![1.0, 0.0, 0.0])),
                (vec![0.7, 0.1, 0.2], vec![], vec![], None),
            ],
        }
        .build(3);
        let cfg = RetrievalConfig {
            layer_weights: LayerWeights::FLAT,
            ..RetrievalConfig::default()
        };
        let q = [0.4, 0.5, 0.6];
        assert_eq!(
            multi_granularity_from_vector(&kb, &q, &cfg, None).unwrap(),
            flat_from_vector(&kb, &q, cfg.flat_k, cfg.flat_threshold).unwrap()
        );
    }

    #[test]
    fn tag_bonus_applies_only_with_query_tags() {
        let mut kb = plain(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let mut parts = kb.to_parts();
        parts.chunks[1].tags.push(Tag::new("topic", "law"));
        kb = LayeredKnowledgeBase::from_parts_unchecked(parts);
        let cfg = RetrievalConfig::default();
        let q = [1.0, 0.0, 0.0];
        let untagged = multi_granularity_from_vector(&kb, &q, &cfg, None).unwrap();
        assert_eq!(untagged[0].score, untagged[1].score);
        let tags: BTreeSet<Tag> = [Tag::new("topic", "law")].into();
        let tagged = multi_granularity_from_vector(&kb, &q, &cfg, Some(&tags)).unwrap();
        assert_eq!(tagged[0].chunk_id, ChunkId(4));
        assert!((tagged[0].score - tagged[1].score - 0.05).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let zero = RetrievalConfig {
            layer_weights: LayerWeights {
                chunk: 0.0,
                atomic: 0.0,
                distilled: 0.0,
                document: 0.0,
            },
            ..RetrievalConfig::default()
        };
        assert!(zero.validate().is_err());
        let bad = RetrievalConfig {
            flat_threshold: 1.5,
            ..RetrievalConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
