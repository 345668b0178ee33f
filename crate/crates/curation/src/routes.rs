use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

use groundst::mining::{MiningError, TurnLibrary};

use crate::state::{CurationError, CurationState, DiversityRequest, SelectionRecord, SpanRequest};

/// Reads share the lock; writes hold it exclusively, so they are applied
/// one at a time and every response sees a consistent library.
pub type Shared = Arc<RwLock<CurationState>>;

impl IntoResponse for CurationError {
    fn into_response(self) -> Response {
        let status = match &self {
            CurationError::UnknownService(_) | CurationError::UnknownKey(_) => StatusCode::NOT_FOUND,
            CurationError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            CurationError::Mining(MiningError::Io { .. } | MiningError::Json { .. }) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            CurationError::Invalid(_) | CurationError::Mining(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, CurationError>;

async fn services(State(s): State<Shared>) -> impl IntoResponse {
    Json(s.read().await.services())
}

async fn keys(State(s): State<Shared>, Path(service): Path<String>) -> ApiResult<Vec<crate::state::KeySummary>> {
    Ok(Json(s.read().await.keys(&service)?))
}

async fn candidates(State(s): State<Shared>, Path(key): Path<String>) -> ApiResult<crate::state::CandidatesView> {
    Ok(Json(s.read().await.candidates(&key)?))
}

async fn selection(
    State(s): State<Shared>,
    Path(key): Path<String>,
    Json(record): Json<SelectionRecord>,
) -> ApiResult<Vec<groundst::mining::LibraryTurn>> {
    Ok(Json(s.write().await.submit(&key, record)?))
}

async fn span(
    State(s): State<Shared>,
    Path(key): Path<String>,
    Json(req): Json<SpanRequest>,
) -> ApiResult<crate::state::ServedCandidate> {
    Ok(Json(s.write().await.register_span(&key, &req)?))
}

async fn diversity(
    State(s): State<Shared>,
    Path(key): Path<String>,
    Json(req): Json<DiversityRequest>,
) -> ApiResult<crate::state::DiversityView> {
    Ok(Json(s.read().await.diversity(&key, &req)?))
}

async fn progress(State(s): State<Shared>) -> impl IntoResponse {
    Json(s.read().await.progress())
}

async fn get_library(State(s): State<Shared>) -> impl IntoResponse {
    Json(s.read().await.library().clone())
}

async fn put_library(State(s): State<Shared>, Json(library): Json<TurnLibrary>) -> ApiResult<TurnLibrary> {
    let mut state = s.write().await;
    state.replace_library(library)?;
    Ok(Json(state.library().clone()))
}

/// All API routes; `static_dir`, when given, is served for every other path.
pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/services", get(services))
        .route("/services/{service}/keys", get(keys))
        .route("/keys/{key}/candidates", get(candidates))
        .route("/keys/{key}/selection", post(selection))
        .route("/keys/{key}/span", post(span))
        .route("/keys/{key}/diversity", post(diversity))
        .route("/progress", get(progress))
        .route("/library", get(get_library).put(put_library))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(listener: TcpListener, state: CurationState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let addr = listener.local_addr()?;
    tracing::info!(%addr, library = %state.library_path().display(), "curation service listening");
    axum::serve(listener, router(Arc::new(RwLock::new(state)), static_dir)).await
}
