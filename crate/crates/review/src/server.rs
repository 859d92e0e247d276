//! HTTP/JSON API over a [`TriageSession`].
//!
//! | route | |
//! |---|---|
//! | `GET /api/candidates?offset&limit` | page of candidates, descending score; `x-total-count` header |
//! | `GET /api/candidates/{id}` | one candidate |
//! | `GET /api/patch/{id}.png` | 100×100 crop |
//! | `POST /api/labels` | `{"id", "decision"}` |
//! | `GET /api/export` | write the coarse patch set, return counts |
//!
//! Anything else falls through to the static UI bundle when one is configured.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::labels::Decision;
use crate::session::{CandidateView, ExportSummary, TriageSession};
use crate::{Result, ReviewError};

const DEFAULT_PAGE: usize = 50;

#[derive(Clone)]
struct AppState {
    /// Also the single writer lock for the labels log.
    session: Arc<Mutex<TriageSession>>,
    export_dir: PathBuf,
}

impl AppState {
    fn lock(&self) -> MutexGuard<'_, TriageSession> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::UnknownCandidate(_) => StatusCode::NOT_FOUND,
            ReviewError::NoDecisions => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    id: String,
    decision: Decision,
}

async fn list(State(st): State<AppState>, Query(q): Query<PageQuery>) -> (HeaderMap, Json<Vec<CandidateView>>) {
    let s = st.lock();
    let page = s
        .page(q.offset.unwrap_or(0), q.limit.unwrap_or(DEFAULT_PAGE))
        .iter()
        .map(CandidateView::from)
        .collect();
    let mut headers = HeaderMap::new();
    headers.insert("x-total-count", HeaderValue::from(s.len()));
    headers.insert("x-pending-count", HeaderValue::from(s.pending()));
    (headers, Json(page))
}

async fn one(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<CandidateView>> {
    Ok(Json(st.lock().get(&id)?.into()))
}

async fn patch(State(st): State<AppState>, Path(file): Path<String>) -> Result<Response> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ReviewError::UnknownCandidate(file.clone()))?;
    let png = st.lock().patch_png(id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn label(State(st): State<AppState>, Json(req): Json<LabelRequest>) -> Result<Json<CandidateView>> {
    let mut s = st.lock();
    Ok(Json(s.record(&req.id, req.decision)?.into()))
}

async fn export(State(st): State<AppState>) -> Result<Json<ExportSummary>> {
    Ok(Json(st.lock().export_to(&st.export_dir)?))
}

/// Routes for `session`; exports go to `export_dir`, and `static_dir` (if
/// any) is served for every path outside `/api`.
pub fn router(session: TriageSession, export_dir: PathBuf, static_dir: Option<PathBuf>) -> Router {
    let state = AppState {
        session: Arc::new(Mutex::new(session)),
        export_dir,
    };
    let api = Router::new()
        .route("/api/candidates", get(list))
        .route("/api/candidates/{id}", get(one))
        .route("/api/patch/{file}", get(patch))
        .route("/api/labels", post(label))
        .route("/api/export", get(export))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until Ctrl-C.
pub async fn serve(listener: TcpListener, app: Router) -> Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("triage service listening on http://{addr}");
    }
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
