use std::collections::{BTreeMap, HashSet};

use super::index::is_unit;
use super::LayeredKnowledgeBase;
use crate::model::{DocumentId, EdgeKind, NodeRef};

/// Lists every violated invariant of the graph. An empty list means the
/// knowledge base is consistent.
pub fn validate_kb_integrity(kb: &LayeredKnowledgeBase) -> Vec<String> {
    let mut out = Vec::new();
    let dim = kb.embedding_dim();
    let next_id = kb.ids().peek();

    let exists = |node: NodeRef| match node {
        NodeRef::Document(id) => kb.document(id).is_some(),
        NodeRef::Chunk(id) => kb.chunk(id).is_some(),
        NodeRef::Atomic(id) => kb.atomic(id).is_some(),
        NodeRef::Unit(id) => kb.unit(id).is_some(),
    };
    let check_id = |raw: u64, node: NodeRef, out: &mut Vec<String>| {
        if raw >= next_id {
            out.push(format!("{node} is not below the id counter {next_id}"));
        }
    };

    let mut uris = HashSet::new();
    for doc in kb.documents() {
        check_id(doc.id.0, NodeRef::Document(doc.id), &mut out);
        if doc.source_uri.trim().is_empty() {
            out.push(format!("{} has an empty source_uri", doc.id));
        } else if !uris.insert(doc.source_uri.as_str()) {
            out.push(format!("{} repeats source_uri {:?}", doc.id, doc.source_uri));
        }
    }

    let mut ordinals: BTreeMap<DocumentId, Vec<u32>> = BTreeMap::new();
    for chunk in kb.chunks() {
        check_id(chunk.id.0, NodeRef::Chunk(chunk.id), &mut out);
        if kb.document(chunk.document_id).is_none() {
            out.push(format!(
                "{} references missing document {}",
                chunk.id, chunk.document_id
            ));
        }
        ordinals.entry(chunk.document_id).or_default().push(chunk.ordinal);
        if chunk.text.is_empty() {
            out.push(format!("{} has empty text", chunk.id));
        }
        if chunk.embedding.len() != dim {
            out.push(format!(
                "{} embedding has dimension {} (expected {dim})",
                chunk.id,
                chunk.embedding.len()
            ));
        } else if !is_unit(&chunk.embedding) {
            out.push(format!("{} embedding is not unit-norm", chunk.id));
        }
        if !kb.chunk_index().contains(&chunk.id) {
            out.push(format!("{} is missing from the chunk index", chunk.id));
        }
        for tag in &chunk.tags {
            if !tag.is_valid() {
                out.push(format!("{} carries an empty tag", chunk.id));
            }
        }
    }
    for (doc, mut ords) in ordinals {
        ords.sort_unstable();
        if ords.iter().enumerate().any(|(i, &o)| o as usize != i) {
            out.push(format!("chunk ordinals of {doc} are not gapless from 0"));
        }
    }

    for a in kb.atomics() {
        check_id(a.id.0, NodeRef::Atomic(a.id), &mut out);
        if kb.chunk(a.chunk_id).is_none() {
            out.push(format!("{} references missing chunk {}", a.id, a.chunk_id));
        }
        if a.question_text.trim().is_empty() {
            out.push(format!("{} has empty question text", a.id));
        }
        if a.embedding.len() != dim {
            out.push(format!(
                "{} embedding has dimension {} (expected {dim})",
                a.id,
                a.embedding.len()
            ));
        } else if !is_unit(&a.embedding) {
            out.push(format!("{} embedding is not unit-norm", a.id));
        }
        if !kb.atomic_index().contains(&a.id) {
            out.push(format!("{} is missing from the atomic index", a.id));
        }
    }

    for u in kb.units() {
        check_id(u.id.0, NodeRef::Unit(u.id), &mut out);
        if kb.chunk(u.source_chunk_id).is_none() {
            out.push(format!(
                "{} references missing chunk {}",
                u.id, u.source_chunk_id
            ));
        }
        if !u.shape_is_valid() {
            out.push(format!("{} fields do not match kind {:?}", u.id, u.kind));
        }
        if !u.embedding.is_empty() {
            if u.embedding.len() != dim {
                out.push(format!(
                    "{} embedding has dimension {} (expected {dim})",
                    u.id,
                    u.embedding.len()
                ));
            } else if !kb.unit_index().contains(&u.id) {
                out.push(format!("{} is missing from the unit index", u.id));
            }
        }
    }

    for (id, v) in kb.document_index().iter() {
        if kb.document(id).is_none() {
            out.push(format!("document index holds unknown {id}"));
        } else if !is_unit(v) {
            out.push(format!("{id} embedding is not unit-norm"));
        }
    }
    for (id, _) in kb.chunk_index().iter() {
        if kb.chunk(id).is_none() {
            out.push(format!("chunk index holds unknown {id}"));
        }
    }
    for (id, _) in kb.atomic_index().iter() {
        if kb.atomic(id).is_none() {
            out.push(format!("atomic index holds unknown {id}"));
        }
    }
    for (id, _) in kb.unit_index().iter() {
        if kb.unit(id).is_none() {
            out.push(format!("unit index holds unknown {id}"));
        }
    }

    // Contains edges must form a tree that mirrors the ownership fields.
    let mut parents: BTreeMap<NodeRef, Vec<NodeRef>> = BTreeMap::new();
    for e in kb.edges() {
        for end in [e.from_node, e.to_node] {
            if !exists(end) {
                out.push(format!(
                    "{:?} edge {} -> {} has a missing endpoint {end}",
                    e.relation, e.from_node, e.to_node
                ));
            }
        }
        match e.relation {
            EdgeKind::Contains => {
                let downward = matches!(
                    (e.from_node, e.to_node),
                    (NodeRef::Document(_), NodeRef::Chunk(_))
                        | (NodeRef::Chunk(_), NodeRef::Atomic(_))
                        | (NodeRef::Chunk(_), NodeRef::Unit(_))
                );
                if !downward {
                    out.push(format!(
                        "contains edge {} -> {} does not point downward",
                        e.from_node, e.to_node
                    ));
                }
                parents.entry(e.to_node).or_default().push(e.from_node);
            }
            EdgeKind::References => {
                if !matches!(
                    (e.from_node, e.to_node),
                    (NodeRef::Document(_), NodeRef::Document(_))
                ) {
                    out.push(format!(
                        "references edge {} -> {} must link documents",
                        e.from_node, e.to_node
                    ));
                }
            }
            EdgeKind::DerivedFrom | EdgeKind::TaggedWith => {}
        }
    }
    // Children of missing owners were already reported above.
    let mut expect_parent = |child: NodeRef, parent: NodeRef| {
        if !exists(parent) {
            return;
        }
        match parents.get(&child).map(Vec::as_slice) {
            Some([p]) if *p == parent => {}
            Some([]) | None => out.push(format!("{child} has no contains edge from {parent}")),
            Some(ps) => out.push(format!(
                "{child} has contains parents {:?}, expected exactly {parent}",
                ps.iter().map(ToString::to_string).collect::<Vec<_>>()
            )),
        }
    };
    for chunk in kb.chunks() {
        expect_parent(NodeRef::Chunk(chunk.id), NodeRef::Document(chunk.document_id));
    }
    for a in kb.atomics() {
        expect_parent(NodeRef::Atomic(a.id), NodeRef::Chunk(a.chunk_id));
    }
    for u in kb.units() {
        expect_parent(NodeRef::Unit(u.id), NodeRef::Chunk(u.source_chunk_id));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbParts;
    use crate::model::{Chunk, ChunkId, DocumentId};

    #[test]
    fn empty_kb_is_valid() {
        assert!(validate_kb_integrity(&LayeredKnowledgeBase::new(8)).is_empty());
    }

    #[test]
    fn dangling_document_is_reported_once_by_name() {
        let chunk = Chunk {
            id: ChunkId(1),
            document_id: DocumentId(0),
            ordinal: 0,
            text: "orphan".into(),
            forward_summary: String::new(),
            embedding: vec![1.0, 0.0],
            tags: vec![],
        };
        let kb = LayeredKnowledgeBase::from_parts_unchecked(KbParts {
            embedding_dim: 2,
            next_id: 2,
            chunks: vec![chunk],
            ..KbParts::default()
        });
        let violations = validate_kb_integrity(&kb);
        assert_eq!(violations.len(), 1, "{violations:?}");
        assert!(violations[0].contains("chunk-1"));
    }
}
