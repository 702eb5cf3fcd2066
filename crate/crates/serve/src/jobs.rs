//! The two offline batch jobs: user query vectors into the feature store,
//! item embeddings into a fresh index.

use mercatran_core::datamodel::{EventRecord, ItemSnapshot};
use mercatran_core::index::{build_index, EmbeddingIndex, IndexedItem};
use mercatran_core::model::MercatranModel;
use mercatran_core::preprocess::{dedup_consecutive, tokenize_item, Vocab};
use rayon::prelude::*;

use crate::{FeatureStore, ServeError};

#[derive(Debug, Default)]
pub struct PrecomputeOutcome {
    pub updated: usize,
    pub unchanged: usize,
    /// Users whose vectors could not be computed (logged by the caller; the
    /// job keeps going).
    pub failed: Vec<(String, String)>,
}

/// Recomputes every user's query vectors from their latest deduplicated
/// events (all sequences merged, windowed to the encoder maximum) and
/// upserts them into the store. Idempotent on an unchanged log.
pub fn precompute_users(
    events: &[EventRecord],
    model: &MercatranModel<f32>,
    vocab: &Vocab,
    store: &mut FeatureStore,
    now_micros: i64,
) -> Result<PrecomputeOutcome, ServeError> {
    // Group by user only: the cache answers for a user, not a sequence.
    let mut by_user: std::collections::BTreeMap<String, Vec<EventRecord>> =
        std::collections::BTreeMap::new();
    for event in events {
        by_user.entry(event.user_id.clone()).or_default().push(event.clone());
    }

    let users: Vec<(String, Vec<EventRecord>)> = by_user.into_iter().collect();
    let computed: Vec<(String, u32, Result<Vec<Vec<f32>>, String>)> = users
        .into_par_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| e.stime_micros);
            let seq = mercatran_core::datamodel::UserSequence {
                user_id: user_id.clone(),
                sequence_id: String::new(),
                events,
            };
            let deduped = dedup_consecutive(&seq);
            let tail_start = deduped.events.len().saturating_sub(model.config.max_history);
            let history: Vec<_> = deduped.events[tail_start..]
                .iter()
                .map(|e| tokenize_item(&e.item, vocab, model.config.max_tokens))
                .collect();
            let count = history.len() as u32;
            let vectors = model
                .generate_query_vectors(&history)
                .map_err(|e| e.to_string());
            (user_id, count, vectors)
        })
        .collect();

    let mut outcome = PrecomputeOutcome::default();
    for (user_id, count, result) in computed {
        match result {
            Ok(vectors) => {
                if store.upsert(&user_id, vectors, count, now_micros)? {
                    outcome.updated += 1;
                } else {
                    outcome.unchanged += 1;
                }
            }
            Err(message) => outcome.failed.push((user_id, message)),
        }
    }
    Ok(outcome)
}

/// Embeds every item with the item tower and builds the exact index.
pub fn precompute_items(
    items: &[ItemSnapshot],
    model: &MercatranModel<f32>,
    vocab: &Vocab,
) -> Result<EmbeddingIndex, ServeError> {
    let tokenized: Vec<_> = items
        .iter()
        .map(|item| tokenize_item(item, vocab, model.config.max_tokens))
        .collect();
    let embeddings = model.encode_items(&tokenized)?;
    let indexed: Result<Vec<IndexedItem>, ServeError> = items
        .iter()
        .zip(embeddings)
        .map(|(item, embedding)| {
            let product = mercatran_core::datamodel::product_id_of(item)?;
            Ok(IndexedItem {
                item_id: item.item_id.clone(),
                embedding,
                brand_id: product.brand_id,
                c2_id: product.c2_id,
            })
        })
        .collect();
    Ok(build_index(indexed?)?)
}
