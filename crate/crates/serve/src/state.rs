//! Shared service state: frozen model, swappable index snapshot, feature
//! store, and the display catalog. Requests clone one index `Arc` up front
//! and answer entirely from that snapshot, so an index swap is atomic from
//! the requester's point of view.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use mercatran_core::datamodel::{parse_event_line, EventRecord, ItemSnapshot, UserSequence};
use mercatran_core::index::{search_topk, EmbeddingIndex};
use mercatran_core::model::MercatranModel;
use mercatran_core::preprocess::{dedup_consecutive, tokenize_item, Vocab};

use crate::{FeatureStore, ServeError};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub brand_name: String,
    pub price: Option<f64>,
}

struct VersionedIndex {
    version: u64,
    index: EmbeddingIndex,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RecommendRequest {
    #[serde(default)]
    pub user_id: Option<String>,
    /// Inline history: event objects in the same shape as event-log lines.
    #[serde(default)]
    pub events: Option<Vec<serde_json::Value>>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendedItem {
    pub item_id: String,
    pub score: f32,
    pub name: Option<String>,
    pub brand_name: Option<String>,
    pub price: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecommendations {
    pub step: usize,
    pub items: Vec<RecommendedItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendResponse {
    pub steps: Vec<StepRecommendations>,
    pub model_version: String,
    pub index_version: u64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SwapOutcome {
    pub previous: Option<u64>,
    pub current: u64,
}

pub struct ServiceState {
    pub model: Arc<MercatranModel<f32>>,
    pub vocab: Vocab,
    pub model_version: String,
    index: RwLock<Option<Arc<VersionedIndex>>>,
    store: RwLock<Arc<FeatureStore>>,
    catalog: RwLock<Arc<HashMap<String, CatalogEntry>>>,
    version_counter: AtomicU64,
}

impl ServiceState {
    pub fn new(model: MercatranModel<f32>, vocab: Vocab, model_version: String) -> ServiceState {
        let steps = model.config.forecast_steps;
        let dim = model.config.d;
        ServiceState {
            model: Arc::new(model),
            vocab,
            model_version,
            index: RwLock::new(None),
            store: RwLock::new(Arc::new(FeatureStore::new(dim, steps))),
            catalog: RwLock::new(Arc::new(HashMap::new())),
            version_counter: AtomicU64::new(0),
        }
    }

    pub fn install_store(&self, store: FeatureStore) {
        *self.store.write() = Arc::new(store);
    }

    pub fn store_snapshot(&self) -> Arc<FeatureStore> {
        self.store.read().clone()
    }

    pub fn set_catalog(&self, items: &[ItemSnapshot]) {
        let map: HashMap<String, CatalogEntry> = items
            .iter()
            .map(|item| {
                (
                    item.item_id.clone(),
                    CatalogEntry {
                        name: item.name.clone(),
                        brand_name: item.brand_name.clone(),
                        price: item.price_usd,
                    },
                )
            })
            .collect();
        *self.catalog.write() = Arc::new(map);
    }

    pub fn index_version(&self) -> Option<u64> {
        self.index.read().as_ref().map(|v| v.version)
    }

    /// Atomically replaces the index snapshot. In-flight requests keep the
    /// snapshot they started with; a dimension mismatch leaves the old index
    /// installed.
    pub fn swap_index(&self, index: EmbeddingIndex) -> Result<SwapOutcome, ServeError> {
        if !index.is_empty() && index.dim() != self.model.config.d {
            return Err(ServeError::DimensionMismatch(format!(
                "index dimension {} vs model dimension {}",
                index.dim(),
                self.model.config.d
            )));
        }
        let version = self.version_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let previous = {
            let mut slot = self.index.write();
            let previous = slot.as_ref().map(|v| v.version);
            *slot = Some(Arc::new(VersionedIndex { version, index }));
            previous
        };
        Ok(SwapOutcome {
            previous,
            current: version,
        })
    }

    fn snapshot(&self) -> Result<Arc<VersionedIndex>, ServeError> {
        self.index.read().clone().ok_or(ServeError::NotReady)
    }

    fn parse_inline_events(values: &[serde_json::Value]) -> Result<Vec<EventRecord>, ServeError> {
        values
            .iter()
            .map(|v| Ok(parse_event_line(&v.to_string())?))
            .collect()
    }

    /// Query vectors for an inline history: sort, dedup, window to the
    /// encoder maximum, tokenize, generate.
    fn vectors_from_events(&self, events: Vec<EventRecord>) -> Result<Vec<Vec<f32>>, ServeError> {
        let mut events = events;
        events.sort_by_key(|e| e.stime_micros);
        let seq = UserSequence {
            user_id: String::new(),
            sequence_id: String::new(),
            events,
        };
        let deduped = dedup_consecutive(&seq);
        if deduped.events.is_empty() {
            return Err(ServeError::EmptyHistory);
        }
        let tail = deduped.events.len().saturating_sub(self.model.config.max_history);
        let history: Vec<_> = deduped.events[tail..]
            .iter()
            .map(|e| tokenize_item(&e.item, &self.vocab, self.model.config.max_tokens))
            .collect();
        Ok(self.model.generate_query_vectors(&history)?)
    }

    /// The recommendation flow: cached vectors when a known `user_id` is
    /// given, otherwise vectors computed from inline events; then one
    /// top-K search per forecast step against the current index snapshot.
    pub fn recommend(&self, request: &RecommendRequest) -> Result<RecommendResponse, ServeError> {
        let k = request.k.unwrap_or(DEFAULT_K);
        if k < 1 {
            return Err(ServeError::BadRequest(format!("k must be >= 1, got {k}")));
        }
        let snapshot = self.snapshot()?;

        let (vectors, cache_hit) = match (&request.events, &request.user_id) {
            (Some(values), _) if !values.is_empty() => {
                let events = Self::parse_inline_events(values)?;
                (self.vectors_from_events(events)?, false)
            }
            (_, Some(user_id)) => match self.store.read().get(user_id) {
                Some(entry) => (entry.vectors.clone(), true),
                None => return Err(ServeError::EmptyHistory),
            },
            _ => return Err(ServeError::EmptyHistory),
        };

        let catalog = self.catalog.read().clone();
        let steps = vectors
            .iter()
            .enumerate()
            .map(|(s, query)| {
                let hits = search_topk(&snapshot.index, query, k)?;
                let items = hits
                    .into_iter()
                    .map(|(item_id, score)| {
                        let entry = catalog.get(&item_id);
                        RecommendedItem {
                            name: entry.map(|e| e.name.clone()),
                            brand_name: entry.map(|e| e.brand_name.clone()),
                            price: entry.and_then(|e| e.price),
                            item_id,
                            score,
                        }
                    })
                    .collect();
                Ok(StepRecommendations { step: s + 1, items })
            })
            .collect::<Result<Vec<_>, ServeError>>()?;

        Ok(RecommendResponse {
            steps,
            model_version: self.model_version.clone(),
            index_version: snapshot.version,
            cache_hit,
        })
    }

    /// Top-K neighbours of an indexed item by its own embedding (the item
    /// itself comes back at rank 1).
    pub fn similar_items(&self, item_id: &str, k: usize) -> Result<RecommendResponse, ServeError> {
        if k < 1 {
            return Err(ServeError::BadRequest(format!("k must be >= 1, got {k}")));
        }
        let snapshot = self.snapshot()?;
        let embedding = snapshot
            .index
            .lookup(item_id)
            .ok_or_else(|| ServeError::UnknownItem(item_id.to_string()))?
            .embedding
            .clone();
        let catalog = self.catalog.read().clone();
        let hits = search_topk(&snapshot.index, &embedding, k)?;
        let items = hits
            .into_iter()
            .map(|(item_id, score)| {
                let entry = catalog.get(&item_id);
                RecommendedItem {
                    name: entry.map(|e| e.name.clone()),
                    brand_name: entry.map(|e| e.brand_name.clone()),
                    price: entry.and_then(|e| e.price),
                    item_id,
                    score,
                }
            })
            .collect();
        Ok(RecommendResponse {
            steps: vec![StepRecommendations { step: 1, items }],
            model_version: self.model_version.clone(),
            index_version: snapshot.version,
            cache_hit: false,
        })
    }
}
