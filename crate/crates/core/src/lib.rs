//! Core library for the Mercatran three-tower sequential recommender.
//!
//! The pipeline runs left to right:
//!
//! ```text
//! event log (.jsonl) ──> datamodel ──> preprocess ──> model (train) ──> index ──> eval
//!                          ▲
//!                       synthgen (desk-scale corpora with planted structure)
//! ```
//!
//! - [`datamodel`]: event/item schema, line parsing, per-user sequence reconstruction.
//! - [`synthgen`]: deterministic synthetic clickstream corpora with planted brand affinity.
//! - [`preprocess`]: dedup/segment/window rules, token vocabulary, item tokenization.
//! - [`nn`]: dense tensors, reverse-mode autodiff tape, Adam, checkpoint format.
//! - [`model`]: the three towers, contrastive multi-step loss, training loop, inference.
//! - [`index`]: exact top-K cosine index over unit-norm item embeddings.
//! - [`eval`]: recall/nDCG primitives and the four-step, three-granularity sweep.

pub mod datamodel;
pub mod eval;
pub mod index;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod synthgen;
