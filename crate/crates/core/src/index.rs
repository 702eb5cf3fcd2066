//! Exact top-K cosine index over unit-norm item embeddings.
//!
//! Embeddings are unit vectors, so cosine similarity is the plain dot
//! product and search is an exact full scan; ties break by item id
//! ascending, which makes result order total and stable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-unit embedding for item {0} (norm {1})")]
    NonUnitEmbedding(String, f32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    CorruptFile(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedItem {
    pub item_id: String,
    pub embedding: Vec<f32>,
    pub brand_id: i64,
    pub c2_id: i64,
}

/// Immutable after build; replacement is a whole-index swap at the call
/// site, so concurrent readers never observe a partial update.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    items: Vec<IndexedItem>,
    by_id: BTreeMap<String, usize>,
}

const NORM_TOLERANCE: f32 = 1e-4;

/// Builds an index from items with consistent dimensions and unit-norm
/// embeddings. A repeated `item_id` keeps the latest entry.
pub fn build_index(items: Vec<IndexedItem>) -> Result<EmbeddingIndex, IndexError> {
    let dim = items.first().map_or(0, |i| i.embedding.len());
    let mut kept: Vec<IndexedItem> = Vec::with_capacity(items.len());
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for item in items {
        if item.embedding.len() != dim {
            return Err(IndexError::DimensionMismatch(format!(
                "item {} has dimension {}, index has {dim}",
                item.item_id,
                item.embedding.len()
            )));
        }
        let norm = item.embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NonUnitEmbedding(item.item_id, norm));
        }
        match by_id.get(&item.item_id) {
            Some(&slot) => kept[slot] = item,
            None => {
                by_id.insert(item.item_id.clone(), kept.len());
                kept.push(item);
            }
        }
    }
    Ok(EmbeddingIndex {
        dim,
        items: kept,
        by_id,
    })
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[IndexedItem] {
        &self.items
    }

    pub fn lookup(&self, item_id: &str) -> Option<&IndexedItem> {
        self.by_id.get(item_id).map(|&slot| &self.items[slot])
    }
}

/// Exact top-K by descending cosine score, ties by item id ascending.
/// Returns `min(k, len)` results.
pub fn search_topk(
    index: &EmbeddingIndex,
    query: &[f32],
    k: usize,
) -> Result<Vec<(String, f32)>, IndexError> {
    if !index.is_empty() && query.len() != index.dim {
        return Err(IndexError::DimensionMismatch(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(f32, &IndexedItem)> = index
        .items
        .iter()
        .map(|item| {
            let score: f32 = item.embedding.iter().zip(query).map(|(a, b)| a * b).sum();
            (score, item)
        })
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| a.1.item_id.cmp(&b.1.item_id))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, item)| (item.item_id.clone(), score))
        .collect())
}

// ---------------------------------------------------------------------------
// File format: magic MIDX1, JSON manifest, id string table, per-item brand
// and category ids, then the float payload (little-endian f32).
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"MIDX1";

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    version: u32,
    count: usize,
    dim: usize,
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), IndexError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    let manifest = serde_json::to_vec(&IndexManifest {
        version: 1,
        count: index.items.len(),
        dim: index.dim,
    })
    .expect("manifest serializes");
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    for item in &index.items {
        out.write_all(&(item.item_id.len() as u32).to_le_bytes())?;
        out.write_all(item.item_id.as_bytes())?;
    }
    for item in &index.items {
        out.write_all(&item.brand_id.to_le_bytes())?;
        out.write_all(&item.c2_id.to_le_bytes())?;
    }
    for item in &index.items {
        for v in &item.embedding {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex, IndexError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(IndexError::CorruptFile("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(eof)?;
    let mut manifest_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut manifest_bytes).map_err(eof)?;
    let manifest: IndexManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| IndexError::CorruptFile(format!("manifest json: {e}")))?;

    let mut ids = Vec::with_capacity(manifest.count);
    for _ in 0..manifest.count {
        let mut len = [0u8; 4];
        file.read_exact(&mut len).map_err(eof)?;
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        file.read_exact(&mut id).map_err(eof)?;
        ids.push(
            String::from_utf8(id)
                .map_err(|e| IndexError::CorruptFile(format!("item id not utf-8: {e}")))?,
        );
    }
    let mut metas = Vec::with_capacity(manifest.count);
    for _ in 0..manifest.count {
        let mut brand = [0u8; 8];
        let mut c2 = [0u8; 8];
        file.read_exact(&mut brand).map_err(eof)?;
        file.read_exact(&mut c2).map_err(eof)?;
        metas.push((i64::from_le_bytes(brand), i64::from_le_bytes(c2)));
    }
    let mut payload = vec![0u8; manifest.count * manifest.dim * 4];
    file.read_exact(&mut payload).map_err(eof)?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(IndexError::CorruptFile("trailing bytes".into()));
    }

    let items: Vec<IndexedItem> = ids
        .into_iter()
        .zip(metas)
        .enumerate()
        .map(|(i, (item_id, (brand_id, c2_id)))| {
            let start = i * manifest.dim * 4;
            let embedding = payload[start..start + manifest.dim * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            IndexedItem {
                item_id,
                embedding,
                brand_id,
                c2_id,
            }
        })
        .collect();
    build_index(items)
}

fn eof(e: std::io::Error) -> IndexError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        IndexError::CorruptFile("truncated file".into())
    } else {
        IndexError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, embedding: Vec<f32>) -> IndexedItem {
        IndexedItem {
            item_id: id.to_string(),
            embedding,
            brand_id: 1,
            c2_id: 2,
        }
    }

    pub(crate) fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    #[test]
    fn empty_index() {
        let index = build_index(Vec::new()).unwrap();
        assert_eq!(index.len(), 0);
        assert!(search_topk(&index, &[1.0, 0.0], 5).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_keep_latest() {
        let index = build_index(vec![
            item("a", vec![1.0, 0.0]),
            item("a", vec![0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.lookup("a").unwrap().embedding, vec![0.0, 1.0]);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let err = build_index(vec![item("a", vec![1.0, 0.0]), item("b", vec![1.0])]);
        assert!(matches!(err, Err(IndexError::DimensionMismatch(_))));
    }

    #[test]
    fn non_unit_embedding_rejected() {
        let err = build_index(vec![item("a", vec![2.0, 0.0])]);
        assert!(matches!(err, Err(IndexError::NonUnitEmbedding(_, _))));
    }

    #[test]
    fn hand_computed_ranking() {
        let index = build_index(vec![
            item("a", vec![1.0, 0.0]),
            item("b", vec![0.0, 1.0]),
            item("c", vec![0.6, 0.8]),
        ])
        .unwrap();
        let hits = search_topk(&index, &[1.0, 0.0], 2).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].0, "a");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
        assert_eq!(hits[1].0, "c");
        assert!((hits[1].1 - 0.6).abs() < 1e-6);
    }

    #[test]
    fn identical_embedding_ranks_first_with_unit_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<IndexedItem> = (0..50)
            .map(|i| item(&format!("i{i:03}"), random_unit(&mut rng, 16)))
            .collect();
        let probe = items[17].embedding.clone();
        let index = build_index(items).unwrap();
        let hits = search_topk(&index, &probe, 3).unwrap();
        assert_eq!(hits[0].0, "i017");
        assert!((hits[0].1 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let index = build_index(vec![
            item("a", vec![1.0, 0.0]),
            item("b", vec![0.0, 1.0]),
            item("c", vec![0.6, 0.8]),
        ])
        .unwrap();
        assert_eq!(search_topk(&index, &[0.6, 0.8], 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_break_by_item_id_ascending() {
        let index = build_index(vec![
            item("zz", vec![1.0, 0.0]),
            item("aa", vec![1.0, 0.0]),
            item("mm", vec![1.0, 0.0]),
        ])
        .unwrap();
        let hits = search_topk(&index, &[1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["aa", "mm", "zz"]);
    }

    /// Independent oracle: naive scan plus full stable sort.
    pub(crate) fn brute_force_topk(
        items: &[IndexedItem],
        query: &[f32],
        k: usize,
    ) -> Vec<(String, f32)> {
        let mut all: Vec<(String, f32)> = items
            .iter()
            .map(|it| {
                let mut score = 0.0f32;
                for (a, b) in it.embedding.iter().zip(query) {
                    score += a * b;
                }
                (it.item_id.clone(), score)
            })
            .collect();
        all.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<IndexedItem> = (0..500)
            .map(|i| item(&format!("i{i:04}"), random_unit(&mut rng, 24)))
            .collect();
        let index = build_index(items.clone()).unwrap();
        for _ in 0..25 {
            let query = random_unit(&mut rng, 24);
            let got = search_topk(&index, &query, 10).unwrap();
            let want = brute_force_topk(&items, &query, 10);
            assert_eq!(got, want);
            for (_, score) in &got {
                assert!(*score >= -1.0 - 1e-5 && *score <= 1.0 + 1e-5);
            }
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_search_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let items: Vec<IndexedItem> = (0..200)
            .map(|i| IndexedItem {
                item_id: format!("i{i:04}"),
                embedding: random_unit(&mut rng, 16),
                brand_id: i % 7,
                c2_id: i % 5,
            })
            .collect();
        let index = build_index(items).unwrap();
        let path = dir.path().join("items.midx");
        save_index(&index, &path).unwrap();
        let loaded = load_index(&path).unwrap();
        assert_eq!(loaded.len(), index.len());
        assert_eq!(loaded.lookup("i0003"), index.lookup("i0003"));
        for q in 0..20 {
            let query = random_unit(&mut ChaCha8Rng::seed_from_u64(q), 16);
            assert_eq!(
                search_topk(&index, &query, 10).unwrap(),
                search_topk(&loaded, &query, 10).unwrap()
            );
        }
    }

    #[test]
    fn empty_index_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.midx");
        save_index(&build_index(Vec::new()).unwrap(), &path).unwrap();
        assert_eq!(load_index(&path).unwrap().len(), 0);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let items = vec![
            item("a", random_unit(&mut rng, 8)),
            item("b", random_unit(&mut rng, 8)),
        ];
        let path = dir.path().join("x.midx");
        save_index(&build_index(items).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.midx");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_index(&cut), Err(IndexError::CorruptFile(_))));
    }
}
