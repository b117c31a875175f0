//! HTTP front end over the API functions. Every handler reads the shared
//! checkpoint; none mutates server state apart from the fallback seed counter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use formgen_core::model::ModelParams;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tower_http::cors::CorsLayer;

use crate::api::{self, default_formation, ApiError, ApiLimits, FormationInput, GenerateRequest};

pub struct AppState {
    pub params: ModelParams,
    pub limits: ApiLimits,
    next_seed: AtomicU64,
}

impl AppState {
    pub fn new(params: ModelParams, limits: ApiLimits) -> Self {
        Self {
            params,
            limits,
            next_seed: AtomicU64::new(0),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = serde_json::json!({ "error": self.error, "detail": self.detail });
        (status, Json(body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))
}

/// Runs a CPU-bound handler off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<api::ModelInfo> {
    Json(api::model_info(&state.params, &state.limits))
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<api::GenerateResponse>, ApiError> {
    let req: GenerateRequest = parse_body(&body)?;
    let fallback = state.next_seed.fetch_add(1, Ordering::Relaxed);
    blocking(move || api::generate(&state.params, &state.limits, &req, fallback))
        .await
        .map(Json)
}

#[derive(Deserialize)]
struct ConceptsQuery {
    /// JSON-encoded [`FormationInput`].
    formation: Option<String>,
}

async fn concepts_get(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ConceptsQuery>,
) -> Result<Json<api::ConceptsResponse>, ApiError> {
    let input = match q.formation {
        Some(text) => parse_body(text.as_bytes())?,
        None => default_formation(state.limits.num_players),
    };
    blocking(move || api::concepts(&state.params, &state.limits, &input))
        .await
        .map(Json)
}

async fn concepts_post(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<api::ConceptsResponse>, ApiError> {
    let input: FormationInput = parse_body(&body)?;
    blocking(move || api::concepts(&state.params, &state.limits, &input))
        .await
        .map(Json)
}

async fn not_found() -> ApiError {
    ApiError {
        status: 404,
        error: "not_found",
        detail: "no such endpoint".into(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/generate", axum::routing::post(generate))
        .route("/api/concepts", get(concepts_get).post(concepts_post))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
