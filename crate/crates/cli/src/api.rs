//! The HTTP/JSON session API.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use crate::manifest::ExperimentManifest;
use crate::store::{parse_body, ApiError, ApiResult, Store};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    /// Required as `Authorization: Bearer <token>` when set.
    pub token: Option<String>,
    /// Seed for manifests that do not set one.
    pub default_seed: u64,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

/// Run a store operation off the async runtime.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<Json<T>, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Store) -> ApiResult<T> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::new(500, "internal", e.to_string()))?
        .map(Json)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let mut value: serde_json::Value = parse_body(&body, false)?;
    if let Some(fields) = value.as_object_mut() {
        fields.entry("seed").or_insert(json!(state.default_seed));
    }
    let manifest: ExperimentManifest =
        serde_json::from_value(value).map_err(|e| ApiError::validation(e.to_string()))?;
    let view = blocking(&state, move |s| s.create(&manifest)).await?;
    Ok((StatusCode::CREATED, view).into_response())
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>) -> impl IntoResponse {
    blocking(&state, move |s| s.state(&id)).await
}

async fn next(State(state): State<AppState>, Path(id): Path<String>) -> impl IntoResponse {
    blocking(&state, move |s| s.next(&id)).await
}

async fn feedback(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> impl IntoResponse {
    let body = parse_body(&body, false)?;
    blocking(&state, move |s| s.feedback(&id, &body)).await
}

async fn labels(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> impl IntoResponse {
    let body = parse_body(&body, false)?;
    blocking(&state, move |s| s.labels(&id, &body)).await
}

async fn evaluate(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> impl IntoResponse {
    let body = parse_body(&body, true)?;
    blocking(&state, move |s| s.evaluate(&id, &body)).await
}

async fn authorize(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(401, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(request).await
}

async fn fallback() -> ApiError {
    ApiError::new(404, "not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    let sessions = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/labels", post(labels))
        .route("/sessions/{id}/evaluate", post(evaluate))
        .route_layer(middleware::from_fn_with_state(state.clone(), authorize));
    Router::new()
        .route("/health", get(health))
        .merge(sessions)
        .fallback(fallback)
        .with_state(state)
}
