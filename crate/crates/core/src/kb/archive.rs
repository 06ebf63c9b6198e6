//! Single-file knowledge-base archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       6           magic "ATOMKB"
//! 6       2           version (u16) = 1
//! 8       8           table_len (u64)
//! 16      table_len   node/edge tables, UTF-8 JSON object:
//!                       { embedding_dim, next_id, documents, chunks,
//!                         atomics, units, edges }
//! ..      8           vector_count (u64)
//! ..      4           dimension (u32)
//! ..      n * (1 + 8 + 8 * dimension)
//!                     vector records: layer (u8: 0 document, 1 chunk,
//!                     2 atomic, 3 unit), node id (u64), components (f64)
//! ```
//!
//! The file ends right after the last vector record. Vectors are written as
//! stored (already unit-normalized), so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KbParts, LayeredKnowledgeBase};
use crate::model::{
    AtomicId, AtomicQuestion, Chunk, ChunkId, DocumentId, DocumentNode, Edge, KnowledgeUnit, UnitId,
};

pub const ARCHIVE_MAGIC: &[u8; 6] = b"ATOMKB";
pub const ARCHIVE_VERSION: u16 = 1;

const LAYER_DOCUMENT: u8 = 0;
const LAYER_CHUNK: u8 = 1;
const LAYER_ATOMIC: u8 = 2;
const LAYER_UNIT: u8 = 3;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a knowledge-base archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt archive: truncated while reading {field}")]
    Truncated { field: &'static str },
    #[error("corrupt archive: field {field}: {detail}")]
    Corrupt { field: &'static str, detail: String },
}

#[derive(Serialize, Deserialize)]
struct Tables {
    embedding_dim: usize,
    next_id: u64,
    documents: Vec<DocumentNode>,
    chunks: Vec<Chunk>,
    atomics: Vec<AtomicQuestion>,
    units: Vec<KnowledgeUnit>,
    edges: Vec<Edge>,
}

pub fn to_bytes(kb: &LayeredKnowledgeBase) -> Vec<u8> {
    let parts = kb.to_parts();
    let dim = parts.embedding_dim;
    let mut vectors: Vec<(u8, u64, &[f64])> = Vec::new();
    for (id, v) in &parts.document_vectors {
        vectors.push((LAYER_DOCUMENT, id.0, v));
    }
    for c in &parts.chunks {
        vectors.push((LAYER_CHUNK, c.id.0, &c.embedding));
    }
    for a in &parts.atomics {
        vectors.push((LAYER_ATOMIC, a.id.0, &a.embedding));
    }
    for u in parts.units.iter().filter(|u| !u.embedding.is_empty()) {
        vectors.push((LAYER_UNIT, u.id.0, &u.embedding));
    }
    let tables = Tables {
        embedding_dim: dim,
        next_id: parts.next_id,
        documents: parts.documents.clone(),
        chunks: parts.chunks.clone(),
        atomics: parts.atomics.clone(),
        units: parts.units.clone(),
        edges: parts.edges.clone(),
    };
    let json = serde_json::to_vec(&tables).expect("tables serialize");

    let mut out = Vec::with_capacity(32 + json.len() + vectors.len() * (9 + 8 * dim));
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (layer, id, v) in vectors {
        debug_assert_eq!(v.len(), dim);
        out.push(layer);
        out.extend_from_slice(&id.to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], ArchiveError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ArchiveError::Truncated { field })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, field: &'static str) -> Result<u8, ArchiveError> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &'static str) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }
    fn u32(&mut self, field: &'static str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &'static str) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f64(&mut self, field: &'static str) -> Result<f64, ArchiveError> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<LayeredKnowledgeBase, ArchiveError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r
        .take(ARCHIVE_MAGIC.len(), "magic")
        .map_err(|_| ArchiveError::BadMagic)?;
    if magic != ARCHIVE_MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != ARCHIVE_VERSION {
        return Err(ArchiveError::VersionMismatch {
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let table_len = r.u64("table_len")?;
    let table_len = usize::try_from(table_len).map_err(|_| ArchiveError::Truncated {
        field: "tables",
    })?;
    let json = r.take(table_len, "tables")?;
    let tables: Tables = serde_json::from_slice(json).map_err(|e| ArchiveError::Corrupt {
        field: "tables",
        detail: e.to_string(),
    })?;
    if tables.embedding_dim == 0 {
        return Err(ArchiveError::Corrupt {
            field: "embedding_dim",
            detail: "must be positive".into(),
        });
    }

    let count = r.u64("vector_count")?;
    let dim = r.u32("dimension")? as usize;
    if dim != tables.embedding_dim {
        return Err(ArchiveError::Corrupt {
            field: "dimension",
            detail: format!(
                "vector block dimension {dim} differs from embedding_dim {}",
                tables.embedding_dim
            ),
        });
    }
    let record = 9 + 8 * dim;
    if (count as u128) * (record as u128) > (buf.len() - r.pos) as u128 {
        return Err(ArchiveError::Truncated { field: "vectors" });
    }

    let mut docs: BTreeMap<DocumentId, Vec<f64>> = BTreeMap::new();
    let mut chunks: BTreeMap<ChunkId, Vec<f64>> = BTreeMap::new();
    let mut atomics: BTreeMap<AtomicId, Vec<f64>> = BTreeMap::new();
    let mut units: BTreeMap<UnitId, Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let layer = r.u8("vector.layer")?;
        let id = r.u64("vector.id")?;
        let v = (0..dim)
            .map(|_| r.f64("vector.components"))
            .collect::<Result<Vec<_>, _>>()?;
        let dup = match layer {
            LAYER_DOCUMENT => docs.insert(DocumentId(id), v).is_some(),
            LAYER_CHUNK => chunks.insert(ChunkId(id), v).is_some(),
            LAYER_ATOMIC => atomics.insert(AtomicId(id), v).is_some(),
            LAYER_UNIT => units.insert(UnitId(id), v).is_some(),
            other => {
                return Err(ArchiveError::Corrupt {
                    field: "vector.layer",
                    detail: format!("unknown layer tag {other}"),
                })
            }
        };
        if dup {
            return Err(ArchiveError::Corrupt {
                field: "vector.id",
                detail: format!("duplicate vector for id {id} in layer {layer}"),
            });
        }
    }
    if r.pos != buf.len() {
        return Err(ArchiveError::Corrupt {
            field: "vectors",
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }

    let missing = |what: &str, id: &dyn std::fmt::Display| ArchiveError::Corrupt {
        field: "vectors",
        detail: format!("no vector for {what} {id}"),
    };
    let mut chunk_rows = tables.chunks;
    for c in &mut chunk_rows {
        c.embedding = chunks.remove(&c.id).ok_or_else(|| missing("chunk", &c.id))?;
    }
    let mut atomic_rows = tables.atomics;
    for a in &mut atomic_rows {
        a.embedding = atomics
            .remove(&a.id)
            .ok_or_else(|| missing("atomic", &a.id))?;
    }
    let mut unit_rows = tables.units;
    for u in &mut unit_rows {
        u.embedding = units.remove(&u.id).unwrap_or_default();
    }
    if let Some(id) = chunks.keys().next() {
        return Err(missing("unknown chunk", id));
    }
    if let Some(id) = atomics.keys().next() {
        return Err(missing("unknown atomic", id));
    }
    if let Some(id) = units.keys().next() {
        return Err(missing("unknown unit", id));
    }
    if let Some(id) = docs.keys().find(|id| !tables.documents.iter().any(|d| d.id == **id)) {
        return Err(missing("unknown document", id));
    }

    Ok(LayeredKnowledgeBase::from_parts_unchecked(KbParts {
        embedding_dim: tables.embedding_dim,
        next_id: tables.next_id,
        documents: tables.documents,
        document_vectors: docs,
        chunks: chunk_rows,
        atomics: atomic_rows,
        units: unit_rows,
        edges: tables.edges,
    }))
}

pub fn save(kb: &LayeredKnowledgeBase, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(kb)).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<LayeredKnowledgeBase, ArchiveError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let kb = LayeredKnowledgeBase::new(3);
        let back = from_bytes(&to_bytes(&kb)).unwrap();
        assert!(kb.same_content(&back));
        assert_eq!(back.embedding_dim(), 3);
    }

    #[test]
    fn truncation_and_bad_headers() {
        let bytes = to_bytes(&LayeredKnowledgeBase::new(3));
        for cut in [0, 3, 7, 12, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, ArchiveError::Truncated { .. } | ArchiveError::BadMagic),
                "cut {cut}: {err}"
            );
        }
        let mut wrong = bytes.clone();
        wrong[6] = 9;
        assert!(matches!(
            from_bytes(&wrong),
            Err(ArchiveError::VersionMismatch { found: 9, .. })
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            from_bytes(&trailing),
            Err(ArchiveError::Corrupt { field: "vectors", .. })
        ));
    }
}
