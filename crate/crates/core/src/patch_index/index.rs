//! Exact (flat) squared-L2 nearest-neighbour index over patch embeddings.
//!
//! On disk an index is a directory with `vectors.bin` (magic, entry count,
//! dimension, then row-major little-endian `f32`s) and `manifest.json`
//! describing the backbone, layer, geometry and per-entry provenance.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::patches::PatchGeometry;
use crate::{util, Error, Result};

pub const VECTORS_FILE: &str = "vectors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 8] = b"SRPIDX01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchProvenance {
    /// Path of the source image.
    pub source_id: String,
    pub grid_pos: u8,
    /// `(row, col)` of the patch's top-left pixel after preprocessing.
    pub pixel_origin: (usize, usize),
}

/// Describes how the stored vectors were produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub backbone_id: String,
    pub layer: String,
    pub geometry: PatchGeometry,
}

impl IndexMeta {
    /// Metadata for indices of arbitrary vectors not tied to a backbone.
    pub fn unattached() -> Self {
        Self {
            backbone_id: "none".into(),
            layer: "none".into(),
            geometry: PatchGeometry::standard(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub metric: String,
    pub dim: usize,
    pub entry_count: usize,
    pub meta: IndexMeta,
    pub vectors_sha256: String,
    pub provenance: Vec<PatchProvenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NearestMatch {
    pub id: usize,
    pub provenance: PatchProvenance,
    /// Squared Euclidean distance.
    pub distance: f32,
}

#[derive(Debug)]
pub struct PatchIndex {
    meta: IndexMeta,
    dim: usize,
    vectors: Vec<f32>,
    provenance: Vec<PatchProvenance>,
    queries: AtomicU64,
}

impl PatchIndex {
    pub fn new(dim: usize, meta: IndexMeta) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Index("embedding dimension must be positive".into()));
        }
        Ok(Self {
            meta,
            dim,
            vectors: Vec::new(),
            provenance: Vec::new(),
            queries: AtomicU64::new(0),
        })
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn add(&mut self, vector: &[f32], provenance: PatchProvenance) -> Result<usize> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Index("refusing to store a non-finite embedding".into()));
        }
        self.vectors.extend_from_slice(vector);
        self.provenance.push(provenance);
        Ok(self.provenance.len() - 1)
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn provenance(&self, id: usize) -> &PatchProvenance {
        &self.provenance[id]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f32], &PatchProvenance)> {
        self.vectors.chunks_exact(self.dim).zip(&self.provenance)
    }

    /// Number of queries served since construction or the last reset.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn reset_query_count(&self) {
        self.queries.store(0, Ordering::Relaxed);
    }

    /// Exhaustive argmin of squared L2 distance; ties go to the lowest id.
    pub fn query_nearest(&self, query: &[f32]) -> Result<NearestMatch> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        if self.is_empty() {
            return Err(Error::Index("query against an empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut best = (0usize, f64::INFINITY);
        for (id, row) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d = squared_l2(row, query);
            if d < best.1 {
                best = (id, d);
            }
        }
        Ok(NearestMatch {
            id: best.0,
            provenance: self.provenance[best.0].clone(),
            distance: best.1 as f32,
        })
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            format_version: FORMAT_VERSION,
            metric: "squared_l2".into(),
            dim: self.dim,
            entry_count: self.len(),
            meta: self.meta.clone(),
            vectors_sha256: String::new(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        util::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(24 + self.vectors.len() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(VECTORS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        let mut manifest = self.manifest();
        manifest.vectors_sha256 = util::sha256_hex(&bytes);
        util::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: IndexManifest = util::read_json(&dir.join(MANIFEST_FILE))?;
        let path = dir.join(VECTORS_FILE);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        if !manifest.vectors_sha256.is_empty() && util::sha256_hex(&bytes) != manifest.vectors_sha256 {
            return Err(Error::Index(format!("{} does not match its manifest digest", path.display())));
        }
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(Error::Index(format!("{} is not an index vector file", path.display())));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if n != manifest.entry_count || d != manifest.dim || manifest.provenance.len() != n {
            return Err(Error::Index(format!(
                "inconsistent index: header {n}×{d}, manifest {}×{} with {} provenance rows",
                manifest.entry_count,
                manifest.dim,
                manifest.provenance.len()
            )));
        }
        let body = &bytes[24..];
        if body.len() != n * d * 4 {
            return Err(Error::Index(format!("{} is truncated", path.display())));
        }
        let vectors = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            meta: manifest.meta,
            dim: d,
            vectors,
            provenance: manifest.provenance,
            queries: AtomicU64::new(0),
        })
    }
}

fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prov(i: usize) -> PatchProvenance {
        PatchProvenance {
            source_id: format!("img{}", i / 4),
            grid_pos: (i % 4) as u8,
            pixel_origin: (0, 0),
        }
    }

    fn index_from(rows: &[Vec<f32>]) -> PatchIndex {
        let mut idx = PatchIndex::new(rows[0].len(), IndexMeta::unattached()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            idx.add(r, prov(i)).unwrap();
        }
        idx
    }

    fn brute_force(rows: &[Vec<f32>], q: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::MAX;
        for (i, r) in rows.iter().enumerate() {
            let mut d = 0.0f64;
            for k in 0..q.len() {
                d += ((r[k] - q[k]) as f64).powi(2);
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    #[test]
    fn single_entry_always_wins() {
        let idx = index_from(&[vec![1.0, 2.0, 3.0]]);
        let m = idx.query_nearest(&[100.0, -4.0, 0.5]).unwrap();
        assert_eq!(m.id, 0);
    }

    #[test]
    fn self_query_has_zero_distance_and_ties_prefer_lowest_id() {
        let rows = vec![vec![0.0, 1.0], vec![5.0, 5.0], vec![0.0, 1.0]];
        let idx = index_from(&rows);
        let m = idx.query_nearest(&[5.0, 5.0]).unwrap();
        assert_eq!((m.id, m.distance), (1, 0.0));
        let m = idx.query_nearest(&[0.0, 1.0]).unwrap();
        assert_eq!((m.id, m.distance), (0, 0.0));
        assert_eq!(idx.query_count(), 2);
    }

    #[test]
    fn errors() {
        let idx = PatchIndex::new(3, IndexMeta::unattached()).unwrap();
        assert!(idx.query_nearest(&[0.0; 3]).is_err());
        let mut idx = index_from(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(idx.query_nearest(&[0.0; 2]), Err(Error::DimensionMismatch { .. })));
        assert!(idx.add(&[0.0; 4], prov(0)).is_err());
        assert!(idx.add(&[0.0, f32::INFINITY, 1.0], prov(0)).is_err());
    }

    #[test]
    fn thousand_entries_agree_with_exhaustive_scan() {
        let mut rng = util::rng(42, 0);
        let rows: Vec<Vec<f32>> = (0..1000).map(|_| util::normal_vec(&mut rng, 32, 0.0, 1.0)).collect();
        let idx = index_from(&rows);
        for _ in 0..100 {
            let q = util::normal_vec(&mut rng, 32, 0.0, 1.0);
            assert_eq!(idx.query_nearest(&q).unwrap().id, brute_force(&rows, &q));
        }
    }

    #[test]
    fn persisted_index_is_rejected_when_corrupted() {
        let dir = tempfile::tempdir().unwrap();
        let idx = index_from(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        idx.save(dir.path()).unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(PatchIndex::load(dir.path()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn query_matches_exhaustive_argmin(
            rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 6), 1..200),
            q in prop::collection::vec(-10.0f32..10.0, 6),
        ) {
            let idx = index_from(&rows);
            prop_assert_eq!(idx.query_nearest(&q).unwrap().id, brute_force(&rows, &q));
        }

        #[test]
        fn save_load_preserves_answers(
            rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 1..50),
            queries in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 1..10),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let idx = index_from(&rows);
            idx.save(dir.path()).unwrap();
            let loaded = PatchIndex::load(dir.path()).unwrap();
            prop_assert_eq!(loaded.len(), idx.len());
            for q in &queries {
                prop_assert_eq!(loaded.query_nearest(q).unwrap(), idx.query_nearest(q).unwrap());
            }
        }
    }
}
