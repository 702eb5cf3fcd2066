//! Offline evaluation: index the test targets, autoregressively generate
//! four query vectors per sequence, and score recall at item, category and
//! brand granularity (plus item-level nDCG) for each forecast step.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{build_index, search_topk, EmbeddingIndex, IndexError, IndexedItem};
use crate::model::{MercatranModel, ModelError};
use crate::preprocess::{FeatureConfig, SbrExample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rank must be >= 1")]
    InvalidRank,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no cutoffs given")]
    NoCutoffs,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Discounted gain of the single relevant item: `1/log2(rank+1)` within the
/// cutoff, else 0. With one relevant item the ideal DCG is 1, so this is
/// already normalized.
pub fn ndcg_single(rank: Option<usize>, k: usize) -> Result<f64, EvalError> {
    match rank {
        None => Ok(0.0),
        Some(0) => Err(EvalError::InvalidRank),
        Some(r) if r > k => Ok(0.0),
        Some(r) => Ok(1.0 / ((r + 1) as f64).log2()),
    }
}

/// Indicator contribution of one query to Recall@K.
pub fn recall_single(hit: bool) -> f64 {
    if hit {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Item,
    Category,
    Brand,
}

pub const GRANULARITIES: [Granularity; 3] =
    [Granularity::Item, Granularity::Category, Granularity::Brand];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub granularity: Granularity,
    /// Forecast step, 1-based.
    pub step: usize,
    /// Item-level only; category/brand rows have no ranking metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<BTreeMap<usize, f64>>,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub feature_config: FeatureConfig,
    pub evaluated_sequences: usize,
    pub indexed_items: usize,
    pub ks: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, granularity: Granularity, step: usize) -> &ReportRow {
        self.rows
            .iter()
            .find(|r| r.granularity == granularity && r.step == step)
            .expect("report covers every cell")
    }

    pub fn recall(&self, granularity: Granularity, step: usize, k: usize) -> f64 {
        self.row(granularity, step).recall[&k]
    }

    pub fn ndcg(&self, step: usize, k: usize) -> f64 {
        self.row(Granularity::Item, step).ndcg.as_ref().expect("item row has ndcg")[&k]
    }
}

/// Compensated (Kahan) summation so aggregation order cannot perturb means.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Builds the evaluation index over the union of all examples' target items
/// (item-tower embeddings with brand/category metadata; duplicate ids keep
/// the latest snapshot).
pub fn build_eval_index(
    model: &MercatranModel<f32>,
    examples: &[SbrExample],
) -> Result<EmbeddingIndex, EvalError> {
    let targets: Vec<_> = examples.iter().flat_map(|ex| ex.targets.iter()).collect();
    let tokens: Vec<_> = targets.iter().map(|t| t.tokens.clone()).collect();
    let embeddings = model.encode_items(&tokens)?;
    let items: Vec<IndexedItem> = targets
        .iter()
        .zip(embeddings)
        .map(|(t, embedding)| IndexedItem {
            item_id: t.item_id.clone(),
            embedding,
            brand_id: t.brand_id,
            c2_id: t.c2_id,
        })
        .collect();
    Ok(build_index(items)?)
}

/// The full protocol: index targets, generate query vectors per example,
/// score every (granularity, step, K) cell.
pub fn evaluate(
    model: &MercatranModel<f32>,
    examples: &[SbrExample],
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let index = build_eval_index(model, examples)?;
    let queries: Vec<Vec<Vec<f32>>> = examples
        .par_iter()
        .map(|ex| model.generate_query_vectors(&ex.history))
        .collect::<Result<_, _>>()?;
    let feature_config = examples[0].history[0].feature_config;
    evaluate_prepared(&index, &queries, examples, ks, feature_config)
}

/// Scores precomputed queries against a prebuilt index. Split out so tests
/// can drive it with oracle or null-model queries.
pub fn evaluate_prepared(
    index: &EmbeddingIndex,
    queries: &[Vec<Vec<f32>>],
    examples: &[SbrExample],
    ks: &[usize],
    feature_config: FeatureConfig,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if ks.is_empty() {
        return Err(EvalError::NoCutoffs);
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let max_k = *ks.last().expect("non-empty ks");
    let steps = examples[0].targets.len();

    // recall[granularity][step][k] and ndcg[step][k] accumulators.
    let mut recall = vec![vec![vec![Kahan::default(); ks.len()]; steps]; GRANULARITIES.len()];
    let mut ndcg = vec![vec![Kahan::default(); ks.len()]; steps];

    for (example, example_queries) in examples.iter().zip(queries) {
        for (s, query) in example_queries.iter().enumerate().take(steps) {
            let target = &example.targets[s];
            let hits = search_topk(index, query, max_k)?;
            // 1-based rank of the ground-truth item, if retrieved.
            let item_rank = hits
                .iter()
                .position(|(id, _)| *id == target.item_id)
                .map(|p| p + 1);
            for (ki, &k) in ks.iter().enumerate() {
                let top = &hits[..k.min(hits.len())];
                let item_hit = item_rank.is_some_and(|r| r <= k);
                let category_hit = top.iter().any(|(id, _)| {
                    index.lookup(id).is_some_and(|item| item.c2_id == target.c2_id)
                });
                let brand_hit = top.iter().any(|(id, _)| {
                    index.lookup(id).is_some_and(|item| item.brand_id == target.brand_id)
                });
                recall[0][s][ki].add(recall_single(item_hit));
                recall[1][s][ki].add(recall_single(category_hit));
                recall[2][s][ki].add(recall_single(brand_hit));
                ndcg[s][ki].add(ndcg_single(item_rank, k)?);
            }
        }
    }

    let n = examples.len() as f64;
    let mut rows = Vec::with_capacity(GRANULARITIES.len() * steps);
    for (g, &granularity) in GRANULARITIES.iter().enumerate() {
        for s in 0..steps {
            let recall_map: BTreeMap<usize, f64> = ks
                .iter()
                .enumerate()
                .map(|(ki, &k)| (k, recall[g][s][ki].sum / n))
                .collect();
            let ndcg_map = (granularity == Granularity::Item).then(|| {
                ks.iter()
                    .enumerate()
                    .map(|(ki, &k)| (k, ndcg[s][ki].sum / n))
                    .collect()
            });
            rows.push(ReportRow {
                granularity,
                step: s + 1,
                ndcg: ndcg_map,
                recall: recall_map,
            });
        }
    }
    Ok(EvalReport {
        feature_config,
        evaluated_sequences: examples.len(),
        indexed_items: index.len(),
        ks,
        rows,
    })
}
