//! HTTP surface: JSON over HTTP/1.1.
//!
//! - `POST /v1/recommendations` `{user_id?, events?, k?}` -> per-step lists
//! - `GET  /v1/items/{item_id}/similar?k=K` -> neighbours by own embedding
//! - `POST /admin/reindex` `{items_path}` -> re-embed an items file and swap
//! - `GET  /healthz` -> status, model and index versions

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::{precompute_items, RecommendRequest, ServeError, ServiceState};

impl ServeError {
    fn status(&self) -> StatusCode {
        match self {
            ServeError::EmptyHistory | ServeError::BadRequest(_) | ServeError::Datamodel(_) => {
                StatusCode::BAD_REQUEST
            }
            ServeError::UnknownItem(_) => StatusCode::NOT_FOUND,
            ServeError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServeError::EmptyHistory => "empty_history",
            ServeError::BadRequest(_) => "bad_request",
            ServeError::UnknownItem(_) => "unknown_item",
            ServeError::NotReady => "not_ready",
            ServeError::DimensionMismatch(_) => "dimension_mismatch",
            _ => "internal",
        }
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": self.code(),
            "message": self.to_string(),
        });
        (self.status(), Json(body)).into_response()
    }
}

async fn recommendations(
    State(state): State<Arc<ServiceState>>,
    Json(request): Json<RecommendRequest>,
) -> Result<Response, ServeError> {
    let state = state.clone();
    let response = tokio::task::spawn_blocking(move || state.recommend(&request))
        .await
        .map_err(|e| ServeError::BadRequest(format!("task join: {e}")))??;
    Ok(Json(response).into_response())
}

async fn similar(
    State(state): State<Arc<ServiceState>>,
    Path(item_id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Response, ServeError> {
    let k = match params.get("k") {
        Some(raw) => raw
            .parse::<usize>()
            .map_err(|_| ServeError::BadRequest(format!("k is not an integer: {raw}")))?,
        None => crate::state::DEFAULT_K,
    };
    let response = tokio::task::spawn_blocking(move || state.similar_items(&item_id, k))
        .await
        .map_err(|e| ServeError::BadRequest(format!("task join: {e}")))??;
    Ok(Json(response).into_response())
}

#[derive(Deserialize)]
struct ReindexRequest {
    items_path: String,
}

#[derive(Serialize)]
struct ReindexResponse {
    index_version: u64,
    indexed_items: usize,
}

async fn reindex(
    State(state): State<Arc<ServiceState>>,
    Json(request): Json<ReindexRequest>,
) -> Result<Response, ServeError> {
    let outcome = tokio::task::spawn_blocking(move || -> Result<ReindexResponse, ServeError> {
        let text = std::fs::read_to_string(&request.items_path)?;
        let items: Result<Vec<_>, _> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(mercatran_core::datamodel::parse_item_line)
            .collect();
        let items = items?;
        let index = precompute_items(&items, &state.model, &state.vocab)?;
        let indexed_items = index.len();
        let swap = state.swap_index(index)?;
        state.set_catalog(&items);
        Ok(ReindexResponse {
            index_version: swap.current,
            indexed_items,
        })
    })
    .await
    .map_err(|e| ServeError::BadRequest(format!("task join: {e}")))??;
    Ok(Json(outcome).into_response())
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Response {
    let body = serde_json::json!({
        "status": if state.index_version().is_some() { "ok" } else { "no_index" },
        "model_version": state.model_version,
        "index_version": state.index_version(),
    });
    Json(body).into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/recommendations", post(recommendations))
        .route("/v1/items/:item_id/similar", get(similar))
        .route("/admin/reindex", post(reindex))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Binds and serves until the returned future completes; `port` 0 picks an
/// ephemeral port, and the bound address is reported through the callback
/// before the accept loop starts.
pub async fn serve_on(
    state: Arc<ServiceState>,
    port: u16,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
