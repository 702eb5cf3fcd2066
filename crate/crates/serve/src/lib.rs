//! Serving layer for the trained retrieval model: two offline batch jobs
//! (user query vectors into a feature store, item embeddings into the vector
//! index), and a small HTTP service that answers recommendation requests
//! from the cache or from inline histories against an atomically swappable
//! index snapshot.

mod http;
mod jobs;
mod state;
mod store;

pub use http::{router, serve_on};
pub use jobs::{precompute_items, precompute_users, PrecomputeOutcome};
pub use state::{
    CatalogEntry, RecommendRequest, RecommendResponse, RecommendedItem, ServiceState,
    StepRecommendations, SwapOutcome,
};
pub use store::{FeatureStore, StoreEntry};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("empty history: no cached vectors and no inline events")]
    EmptyHistory,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("service not ready: no index loaded")]
    NotReady,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown item: {0}")]
    UnknownItem(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Model(#[from] mercatran_core::model::ModelError),
    #[error(transparent)]
    Index(#[from] mercatran_core::index::IndexError),
    #[error(transparent)]
    Datamodel(#[from] mercatran_core::datamodel::DatamodelError),
}
