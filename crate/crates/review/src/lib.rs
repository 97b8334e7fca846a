//! Review service: an HTTP+JSON queue over prescreened events where analysts
//! assign one of the seven raw event types, add notes, and export the result
//! as a corpus for retraining.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/health` | no auth |
//! | GET, POST | `/api/projects` | list, create |
//! | POST | `/api/projects/{id}/enqueue` | body: a `review_queue.json` run artifact |
//! | GET | `/api/projects/{id}/next?reviewer=` | lease the next pending item |
//! | GET | `/api/projects/{id}/events/{eid}` | item with label history |
//! | POST | `/api/projects/{id}/events/{eid}/label` | `{label, note}` |
//! | POST | `/api/projects/{id}/events/{eid}/skip` | |
//! | GET | `/api/projects/{id}/export?format=jsonl` | labeled items as corpus rows |
//!
//! Every route but health needs `Authorization: Bearer <token>`; the token
//! names the reviewer.

pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path as UrlPath, Query, State as AxState};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use sdie_core::corpus::{ingest_events, RawLabel};
use sdie_core::pipeline::{format_for_path, Artifact, CorpusRef, ReviewQueue};
use sdie_core::text::Cleaner;
use store::{Progress, Project, ReviewItem, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Append-only review log; relative to the config file.
    pub log: PathBuf,
    /// Bearer token to reviewer name.
    pub tokens: BTreeMap<String, String>,
    pub lease_minutes: i64,
    pub bind: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            log: PathBuf::from("review.log"),
            tokens: BTreeMap::new(),
            lease_minutes: store::DEFAULT_LEASE_MINUTES,
            bind: "127.0.0.1:8080".into(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config: ServiceConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if config.log.is_relative() {
            config.log = path.parent().unwrap_or(Path::new(".")).join(&config.log);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err("no reviewer tokens configured".into());
        }
        if self.tokens.iter().any(|(t, r)| t.trim().is_empty() || r.trim().is_empty()) {
            return Err("tokens and reviewer names must be non-empty".into());
        }
        if self.lease_minutes <= 0 {
            return Err(format!("lease_minutes must be positive, got {}", self.lease_minutes));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Store>,
    tokens: Arc<BTreeMap<String, String>>,
}

impl AppState {
    pub fn new(store: Store, tokens: BTreeMap<String, String>) -> Self {
        Self { store: Arc::new(store), tokens: Arc::new(tokens) }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::NoProject(_) | StoreError::NoItem { .. } => StatusCode::NOT_FOUND,
            StoreError::DuplicateName(_) | StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::BAD_REQUEST,
            StoreError::Corrupt { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Reviewer identified by the bearer token.
pub struct Reviewer(pub String);

impl FromRequestParts<AppState> for Reviewer {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
        state
            .tokens
            .get(token.trim())
            .map(|r| Reviewer(r.clone()))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"))
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Run store work off the async executor; writes fsync.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectView {
    #[serde(flatten)]
    pub project: Project,
    pub progress: Progress,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateProject {
    name: String,
    corpus: PathBuf,
    #[serde(default)]
    vocabulary_version: Option<String>,
    #[serde(default)]
    members: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnqueueResponse {
    pub added: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    pub item: Option<ReviewItem>,
    pub progress: Progress,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    label: String,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    reviewer: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<String>,
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn list_projects(AxState(state): AxState<AppState>, _: Reviewer) -> ApiResult<Json<Vec<ProjectView>>> {
    let snapshot = state.store.snapshot();
    let views = snapshot
        .projects
        .iter()
        .map(|p| Ok(ProjectView { project: p.clone(), progress: snapshot.progress(&p.id)? }))
        .collect::<Result<_, StoreError>>()?;
    Ok(Json(views))
}

async fn create_project(
    AxState(state): AxState<AppState>,
    Reviewer(reviewer): Reviewer,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ProjectView>)> {
    let req: CreateProject = parse_json(&body)?;
    let view = blocking(move || {
        let file = std::fs::File::open(&req.corpus)
            .map_err(|e| ApiError::bad_request(format!("corpus {}: {e}", req.corpus.display())))?;
        let ingest = ingest_events(file, format_for_path(&req.corpus), &Cleaner::default())
            .map_err(|e| ApiError::bad_request(format!("corpus {}: {e}", req.corpus.display())))?;
        let corpus = CorpusRef::of_file(&req.corpus, ingest.corpus.len())
            .map_err(|e| ApiError::bad_request(format!("corpus {}: {e}", req.corpus.display())))?;
        let mut members = req.members;
        if !members.contains(&reviewer) {
            members.insert(0, reviewer);
        }
        let project = state.store.create_project(&req.name, corpus, req.vocabulary_version, members)?;
        let progress = state.store.snapshot().progress(&project.id)?;
        Ok(ProjectView { project, progress })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn enqueue(
    AxState(state): AxState<AppState>,
    UrlPath(id): UrlPath<String>,
    _: Reviewer,
    body: Bytes,
) -> ApiResult<Json<EnqueueResponse>> {
    let queue: Artifact<ReviewQueue> = parse_json(&body)?;
    let added = blocking(move || {
        let project = state.store.snapshot().project(&id)?.clone();
        if queue.body.corpus.sha256 != project.corpus.sha256 {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("corpus mismatch: queue was built from {}, project uses {}", queue.body.corpus.path, project.corpus.path),
            ));
        }
        if let (Some(want), Some(p)) = (&project.vocabulary_version, &queue.provenance) {
            if &p.vocabulary_version != want {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("vocabulary mismatch: queue uses {}, project uses {want}", p.vocabulary_version),
                ));
            }
        }
        let added = state.store.enqueue(&id, queue.body.items)?;
        let total = state.store.snapshot().progress(&id)?.total;
        Ok(EnqueueResponse { added, total })
    })
    .await?;
    Ok(Json(added))
}

async fn next_item(
    AxState(state): AxState<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<NextQuery>,
    Reviewer(reviewer): Reviewer,
) -> ApiResult<Json<NextResponse>> {
    if let Some(asked) = q.reviewer.filter(|r| r != &reviewer) {
        return Err(ApiError::new(StatusCode::FORBIDDEN, format!("token belongs to {reviewer}, not {asked}")));
    }
    let item = state.store.next_item(&id, &reviewer)?;
    let progress = state.store.snapshot().progress(&id)?;
    Ok(Json(NextResponse { item, progress }))
}

async fn get_item(
    AxState(state): AxState<AppState>,
    UrlPath((id, eid)): UrlPath<(String, String)>,
    _: Reviewer,
) -> ApiResult<Json<ReviewItem>> {
    Ok(Json(state.store.snapshot().item(&id, &eid)?.clone()))
}

/// Only the seven canonical type names are accepted.
fn parse_label(s: &str) -> ApiResult<RawLabel> {
    RawLabel::LABELED
        .into_iter()
        .find(|l| l.as_str() == s)
        .ok_or_else(|| ApiError::bad_request(format!("unknown label {s:?}; expected one of ISOL, FLOW, LOCA, LOAC, LOOP, SFP, NON_SDIE")))
}

async fn submit_label(
    AxState(state): AxState<AppState>,
    UrlPath((id, eid)): UrlPath<(String, String)>,
    Reviewer(reviewer): Reviewer,
    body: Bytes,
) -> ApiResult<Json<ReviewItem>> {
    let req: LabelBody = parse_json(&body)?;
    let label = parse_label(&req.label)?;
    let item = blocking(move || Ok(state.store.submit_label(&id, &eid, label, req.note, &reviewer)?)).await?;
    Ok(Json(item))
}

async fn skip_item(
    AxState(state): AxState<AppState>,
    UrlPath((id, eid)): UrlPath<(String, String)>,
    Reviewer(reviewer): Reviewer,
) -> ApiResult<Json<ReviewItem>> {
    let item = blocking(move || Ok(state.store.skip(&id, &eid, &reviewer)?)).await?;
    Ok(Json(item))
}

async fn export(
    AxState(state): AxState<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ExportQuery>,
    _: Reviewer,
) -> ApiResult<Response> {
    match q.format.as_deref().unwrap_or("jsonl") {
        "jsonl" => {}
        other => return Err(ApiError::bad_request(format!("unsupported export format {other:?}"))),
    }
    let body = state.store.export_jsonl(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/projects", get(list_projects).post(create_project))
        .route("/api/projects/{id}/enqueue", post(enqueue))
        .route("/api/projects/{id}/next", get(next_item))
        .route("/api/projects/{id}/events/{eid}", get(get_item))
        .route("/api/projects/{id}/events/{eid}/label", post(submit_label))
        .route("/api/projects/{id}/events/{eid}/skip", post(skip_item))
        .route("/api/projects/{id}/export", get(export))
        .with_state(state)
}

/// Open the log and serve until interrupted.
pub fn serve(config: &ServiceConfig) -> Result<(), String> {
    config.validate()?;
    let addr: SocketAddr = config.bind.parse().map_err(|e| format!("bind address {:?}: {e}", config.bind))?;
    let store = Store::open(&config.log, store::system_clock())
        .map_err(|e| e.to_string())?
        .with_lease(chrono::Duration::minutes(config.lease_minutes));
    let app = router(AppState::new(store, config.tokens.clone()));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("{addr}: {e}"))?;
        log::info!("review service listening on {addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}
