//! User-vector feature store: a local persistent key-value file keyed by
//! user id. Records are kept sorted by user id, so an unchanged store saves
//! to byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ServeError;

const MAGIC: &[u8; 5] = b"MSTR1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    /// One query vector per forecast step, unit-norm.
    pub vectors: Vec<Vec<f32>>,
    pub computed_at_micros: i64,
    pub source_event_count: u32,
}

#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    steps: usize,
    entries: BTreeMap<String, StoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    version: u32,
    dim: usize,
    steps: usize,
    count: usize,
}

impl FeatureStore {
    pub fn new(dim: usize, steps: usize) -> FeatureStore {
        FeatureStore {
            dim,
            steps,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&StoreEntry> {
        self.entries.get(user_id)
    }

    /// Inserts or replaces a user's vectors. Returns false (and keeps the
    /// existing `computed_at`) when the stored vectors and event count are
    /// already identical, which is what makes reruns byte-stable.
    pub fn upsert(
        &mut self,
        user_id: &str,
        vectors: Vec<Vec<f32>>,
        source_event_count: u32,
        now_micros: i64,
    ) -> Result<bool, ServeError> {
        if vectors.len() != self.steps || vectors.iter().any(|v| v.len() != self.dim) {
            return Err(ServeError::DimensionMismatch(format!(
                "store wants {}x{}, got {}x{}",
                self.steps,
                self.dim,
                vectors.len(),
                vectors.first().map_or(0, |v| v.len())
            )));
        }
        if let Some(existing) = self.entries.get(user_id) {
            if existing.vectors == vectors && existing.source_event_count == source_event_count {
                return Ok(false);
            }
        }
        self.entries.insert(
            user_id.to_string(),
            StoreEntry {
                vectors,
                computed_at_micros: now_micros,
                source_event_count,
            },
        );
        Ok(true)
    }

    pub fn save(&self, path: &Path) -> Result<(), ServeError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(&StoreManifest {
            version: 1,
            dim: self.dim,
            steps: self.steps,
            count: self.entries.len(),
        })
        .expect("manifest serializes");
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        for (user_id, entry) in &self.entries {
            out.write_all(&(user_id.len() as u32).to_le_bytes())?;
            out.write_all(user_id.as_bytes())?;
            out.write_all(&entry.computed_at_micros.to_le_bytes())?;
            out.write_all(&entry.source_event_count.to_le_bytes())?;
            for vector in &entry.vectors {
                for v in vector {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureStore, ServeError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        file.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(ServeError::CorruptFile("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(eof)?;
        let mut manifest_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
        file.read_exact(&mut manifest_bytes).map_err(eof)?;
        let manifest: StoreManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| ServeError::CorruptFile(format!("manifest json: {e}")))?;

        let mut store = FeatureStore::new(manifest.dim, manifest.steps);
        for _ in 0..manifest.count {
            let mut len = [0u8; 4];
            file.read_exact(&mut len).map_err(eof)?;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            file.read_exact(&mut id).map_err(eof)?;
            let user_id = String::from_utf8(id)
                .map_err(|e| ServeError::CorruptFile(format!("user id not utf-8: {e}")))?;
            let mut at = [0u8; 8];
            file.read_exact(&mut at).map_err(eof)?;
            let mut count = [0u8; 4];
            file.read_exact(&mut count).map_err(eof)?;
            let mut vectors = Vec::with_capacity(manifest.steps);
            for _ in 0..manifest.steps {
                let mut buf = vec![0u8; manifest.dim * 4];
                file.read_exact(&mut buf).map_err(eof)?;
                vectors.push(
                    buf.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                );
            }
            store.entries.insert(
                user_id,
                StoreEntry {
                    vectors,
                    computed_at_micros: i64::from_le_bytes(at),
                    source_event_count: u32::from_le_bytes(count),
                },
            );
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(ServeError::CorruptFile("trailing bytes".into()));
        }
        Ok(store)
    }
}

fn eof(e: std::io::Error) -> ServeError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ServeError::CorruptFile("truncated file".into())
    } else {
        ServeError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vectors(seed: f32) -> Vec<Vec<f32>> {
        (0..4)
            .map(|s| {
                let mut v = vec![0.0f32; 8];
                v[s] = 1.0;
                v[4] = seed;
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect()
    }

    #[test]
    fn roundtrip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::new(8, 4);
        assert!(store.upsert("u2", vectors(0.2), 12, 1000).unwrap());
        assert!(store.upsert("u1", vectors(0.7), 9, 2000).unwrap());

        let p1 = dir.path().join("a.mstore");
        let p2 = dir.path().join("b.mstore");
        store.save(&p1).unwrap();
        store.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = FeatureStore::load(&p1).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("u1"), store.get("u1"));
        assert_eq!(loaded.get("u2"), store.get("u2"));
    }

    #[test]
    fn unchanged_upsert_preserves_timestamp() {
        let mut store = FeatureStore::new(8, 4);
        assert!(store.upsert("u1", vectors(0.5), 7, 111).unwrap());
        assert!(!store.upsert("u1", vectors(0.5), 7, 999).unwrap());
        assert_eq!(store.get("u1").unwrap().computed_at_micros, 111);

        // Different vectors do replace, with the new timestamp.
        assert!(store.upsert("u1", vectors(0.9), 7, 999).unwrap());
        assert_eq!(store.get("u1").unwrap().computed_at_micros, 999);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = FeatureStore::new(8, 4);
        let bad = vec![vec![0.0f32; 8]; 3];
        assert!(matches!(
            store.upsert("u", bad, 1, 0),
            Err(ServeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn truncated_store_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::new(4, 4);
        store
            .upsert("user", vec![vec![0.5, 0.5, 0.5, 0.5]; 4], 3, 5)
            .unwrap();
        let path = dir.path().join("s.mstore");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.mstore");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            FeatureStore::load(&cut),
            Err(ServeError::CorruptFile(_))
        ));
    }
}
