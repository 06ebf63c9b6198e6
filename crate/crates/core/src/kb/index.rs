//! Exact brute-force vector index over unit-normalized embeddings.

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
const ALREADY_UNIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("non-finite component in vector")]
    NonFinite,
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(VectorError::NonFinite);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns a unit-length copy of `v`. Vectors that are already unit length
/// to rounding are copied unchanged, so normalizing twice is bit-stable.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, VectorError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(VectorError::NonFinite);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    if (norm - 1.0).abs() <= ALREADY_UNIT_TOLERANCE {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn is_unit(v: &[f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE
}

/// Vectors are stored normalized, so scoring a query is one dot product per
/// entry. Results are ordered by score descending, then id ascending.
#[derive(Debug, Clone)]
pub struct VectorIndex<K> {
    dimension: usize,
    ids: Vec<K>,
    data: Vec<f64>,
    positions: HashMap<K, usize>,
}

impl<K: Copy + Ord + Hash> VectorIndex<K> {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ids: Vec::new(),
            data: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &K) -> bool {
        self.positions.contains_key(id)
    }

    /// Inserts or replaces the vector for `id`, normalizing it first.
    pub fn upsert(&mut self, id: K, vector: &[f64]) -> Result<(), VectorError> {
        if vector.len() != self.dimension {
            return Err(VectorError::DimensionMismatch {
                expected: self.dimension,
                actual: vector.len(),
            });
        }
        let unit = normalize(vector)?;
        match self.positions.get(&id) {
            Some(&pos) => {
                let start = pos * self.dimension;
                self.data[start..start + self.dimension].copy_from_slice(&unit);
            }
            None => {
                self.positions.insert(id, self.ids.len());
                self.ids.push(id);
                self.data.extend_from_slice(&unit);
            }
        }
        Ok(())
    }

    pub fn remove(&mut self, id: &K) -> bool {
        let Some(pos) = self.positions.remove(id) else {
            return false;
        };
        let last = self.ids.len() - 1;
        let d = self.dimension;
        if pos != last {
            let moved = self.ids[last];
            self.ids.swap(pos, last);
            let (head, tail) = self.data.split_at_mut(last * d);
            head[pos * d..pos * d + d].copy_from_slice(&tail[..d]);
            self.positions.insert(moved, pos);
        }
        self.ids.pop();
        self.data.truncate(last * d);
        true
    }

    pub fn get(&self, id: &K) -> Option<&[f64]> {
        self.positions
            .get(id)
            .map(|&pos| &self.data[pos * self.dimension..(pos + 1) * self.dimension])
    }

    pub fn iter(&self) -> impl Iterator<Item = (K, &[f64])> + '_ {
        self.ids
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.dimension.max(1)))
    }

    /// Top-`k` entries with score `>= threshold`.
    pub fn nearest(
        &self,
        query: &[f64],
        k: usize,
        threshold: f64,
    ) -> Result<Vec<(K, f64)>, VectorError> {
        self.nearest_filtered(query, k, threshold, |_| true)
    }

    /// Like [`nearest`](Self::nearest) but only considers ids accepted by `keep`.
    pub fn nearest_filtered(
        &self,
        query: &[f64],
        k: usize,
        threshold: f64,
        keep: impl Fn(&K) -> bool,
    ) -> Result<Vec<(K, f64)>, VectorError> {
        if query.len() != self.dimension {
            return Err(VectorError::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        if self.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let q = normalize(query)?;
        let mut hits: Vec<(K, f64)> = self
            .iter()
            .filter(|(id, _)| keep(id))
            .map(|(id, v)| (id, dot(&q, v).clamp(-1.0, 1.0)))
            .filter(|(_, s)| *s >= threshold)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hits.truncate(k);
        Ok(hits)
    }

    /// Scores every entry against `query` (already normalized).
    pub fn score_all(&self, unit_query: &[f64]) -> HashMap<K, f64> {
        self.iter()
            .map(|(id, v)| (id, dot(unit_query, v).clamp(-1.0, 1.0)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(VectorError::ZeroVector)
        );
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(VectorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nearest_basic_contracts() {
        let mut idx = VectorIndex::new(2);
        idx.upsert(1u64, &[1.0, 0.0]).unwrap();
        idx.upsert(2u64, &[1.0, 1.0]).unwrap();
        let hits = idx.nearest(&[1.0, 0.0], 5, 0.0).unwrap();
        assert_eq!(hits[0], (1, 1.0));
        assert!(idx.nearest(&[0.0, 1.0], 5, 1.0).unwrap().is_empty());
        let empty: VectorIndex<u64> = VectorIndex::new(2);
        assert!(empty.nearest(&[1.0, 0.0], 3, 0.0).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut idx = VectorIndex::new(2);
        for id in [9u64, 3, 5] {
            idx.upsert(id, &[0.0, 2.0]).unwrap();
        }
        let ids: Vec<u64> = idx
            .nearest(&[0.0, 1.0], 3, 0.0)
            .unwrap()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        assert_eq!(ids, vec![3, 5, 9]);
    }

    #[test]
    fn remove_keeps_other_vectors_intact() {
        let mut idx = VectorIndex::new(2);
        idx.upsert(1u64, &[1.0, 0.0]).unwrap();
        idx.upsert(2u64, &[0.0, 1.0]).unwrap();
        idx.upsert(3u64, &[1.0, 1.0]).unwrap();
        assert!(idx.remove(&1));
        assert!(!idx.remove(&1));
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.get(&2).unwrap(), &[0.0, 1.0]);
        assert!(is_unit(idx.get(&3).unwrap()));
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_bit_stable(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            proptest::prop_assume!(v.iter().any(|x| *x != 0.0));
            let once = normalize(&v).unwrap();
            let twice = normalize(&once).unwrap();
            proptest::prop_assert!(is_unit(&once));
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            proptest::prop_assert_eq!(bits(&once), bits(&twice));
        }
    }
}
