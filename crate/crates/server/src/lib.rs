//! HTTP API for human verification of correction proposals.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/api/candidates?status=pending\|decided\|all&page=&per_page=` | paginated proposal list |
//! | GET | `/api/candidates/{proposal_id}` | proposal with episode and step context |
//! | GET | `/api/screenshots/{episode_id}/{step_id}` | screenshot bytes |
//! | POST | `/api/candidates/{proposal_id}/decision` | record a decision |
//! | GET | `/api/progress` | queue counts |
//!
//! Decisions are appended and synced to the store's ledger before the
//! response is sent. Errors are JSON objects with an `error` field; a 409
//! also carries `decided_by`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use forge_core::dataset::{Action, Dataset, Split, Step};
use forge_core::review::{CorrectionProposal, Decision, Progress, ProposalStore, StoreError};

pub const DEFAULT_PER_PAGE: usize = 50;
pub const MAX_PER_PAGE: usize = 500;

/// Shared service state. The store is the single writer for decisions.
pub struct AppState {
    store: Mutex<ProposalStore>,
    dataset: Dataset,
    screenshot_root: PathBuf,
}

impl AppState {
    pub fn new(store: ProposalStore, dataset: Dataset, screenshot_root: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            store: Mutex::new(store),
            dataset,
            screenshot_root: screenshot_root.into(),
        })
    }

    fn store(&self) -> MutexGuard<'_, ProposalStore> {
        // a panic mid-decision cannot leave memory ahead of the ledger, so
        // the guarded state is still consistent
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    decided_by: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            decided_by: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::not_found(e.to_string()),
            StoreError::AlreadyDecided { ref decided_by, .. } => ApiError {
                status: StatusCode::CONFLICT,
                decided_by: Some(decided_by.clone()),
                message: e.to_string(),
            },
            StoreError::InvalidDecision(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            other => {
                tracing::error!(error = %other, "store failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string())
            }
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    decided_by: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: &self.message,
            decided_by: self.decided_by.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    #[default]
    Pending,
    Decided,
    All,
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    #[serde(default)]
    pub status: StatusFilter,
    pub page: Option<usize>,
    pub per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ListItem {
    pub proposal: CorrectionProposal,
    pub goal: String,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ListPage {
    pub items: Vec<ListItem>,
    /// 1-based.
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EpisodeContext {
    pub episode_id: String,
    pub goal: String,
    pub split: Split,
    pub n_steps: usize,
    /// Labeled actions of the steps before the flagged one.
    pub history: Vec<(u32, Action)>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateDetail {
    pub proposal: CorrectionProposal,
    pub failures: BTreeMap<String, Option<Action>>,
    pub episode: EpisodeContext,
    /// The flagged step, including element boxes and accepted actions.
    pub step: Option<Step>,
    pub screenshot_url: Option<String>,
}

async fn list_candidates(
    State(state): State<Arc<AppState>>,
    query: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<ListPage>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let page = q.page.unwrap_or(1);
    let per_page = q.per_page.unwrap_or(DEFAULT_PER_PAGE);
    if page == 0 || per_page == 0 || per_page > MAX_PER_PAGE {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("page must be >= 1 and per_page in 1..={MAX_PER_PAGE}"),
        ));
    }
    let store = state.store();
    let matching: Vec<&CorrectionProposal> = store
        .entries()
        .iter()
        .map(|e| &e.proposal)
        .filter(|p| match q.status {
            StatusFilter::Pending => !p.status.is_terminal(),
            StatusFilter::Decided => p.status.is_terminal(),
            StatusFilter::All => true,
        })
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip((page - 1).saturating_mul(per_page))
        .take(per_page)
        .map(|p| {
            let ep = state.dataset.get(&p.episode_id);
            ListItem {
                proposal: p.clone(),
                goal: ep.map(|e| e.goal.clone()).unwrap_or_default(),
                split: ep.map_or(Split::Easy, |e| e.split),
            }
        })
        .collect();
    Ok(Json(ListPage {
        items,
        page,
        per_page,
        total,
    }))
}

async fn candidate_detail(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<CandidateDetail>, ApiError> {
    let entry = state
        .store()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown proposal `{id}`")))?;
    let p = &entry.proposal;
    let ep = state
        .dataset
        .get(&p.episode_id)
        .ok_or_else(|| ApiError::not_found(format!("episode `{}` is not in the served dataset", p.episode_id)))?;
    let step = p.step_id.and_then(|s| ep.step(s)).cloned();
    let history = ep
        .steps
        .iter()
        .take_while(|s| p.step_id.is_some_and(|f| s.step_id < f))
        .map(|s| (s.step_id, s.canonical_action().clone()))
        .collect();
    let screenshot_url = step
        .as_ref()
        .map(|s| format!("/api/screenshots/{}/{}", p.episode_id, s.step_id));
    Ok(Json(CandidateDetail {
        episode: EpisodeContext {
            episode_id: ep.episode_id.clone(),
            goal: ep.goal.clone(),
            split: ep.split,
            n_steps: ep.steps.len(),
            history,
        },
        step,
        screenshot_url,
        failures: entry.failures.clone(),
        proposal: entry.proposal,
    }))
}

/// Joins a dataset-relative path onto `root`, refusing anything that could
/// escape it.
fn resolve_under(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    let joined = root.join(rel);
    let canon = joined.canonicalize().ok()?;
    let root = root.canonicalize().ok()?;
    canon.starts_with(&root).then_some(canon)
}

async fn screenshot(
    State(state): State<Arc<AppState>>,
    UrlPath((episode_id, step_id)): UrlPath<(String, u32)>,
) -> Result<Response, ApiError> {
    let step = state
        .dataset
        .step(&episode_id, step_id)
        .map_err(|e| ApiError::not_found(e.to_string()))?;
    let path = resolve_under(&state.screenshot_root, &step.screenshot_path)
        .ok_or_else(|| ApiError::not_found(format!("no screenshot for {episode_id}/{step_id}")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::not_found(format!("screenshot unreadable: {e}")))?;
    let mime = mime_guess::from_path(&path).first_or_octet_stream();
    Ok((
        [(header::CONTENT_TYPE, mime.essence_str().to_owned())],
        Bytes::from(bytes),
    )
        .into_response())
}

fn check_edit_against_step(decision: &Decision, step: Option<&Step>) -> Result<(), ApiError> {
    let (Some(edit), Some(step)) = (&decision.edited_proposal, step) else {
        return Ok(());
    };
    for a in edit.revised_gt.iter().flatten() {
        if let Some(p) = a.point() {
            if !(p.is_valid() && p.x <= f64::from(step.screen_w) && p.y <= f64::from(step.screen_h)) {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!(
                        "revised action {a} lies outside the {}x{} screen",
                        step.screen_w, step.screen_h
                    ),
                ));
            }
        }
    }
    Ok(())
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<Decision>, JsonRejection>,
) -> Result<Json<CorrectionProposal>, ApiError> {
    let Json(decision) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    let mut store = state.store();
    let entry = store
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown proposal `{id}`")))?;
    let step = entry
        .proposal
        .step_id
        .and_then(|s| state.dataset.step(&entry.proposal.episode_id, s).ok());
    check_edit_against_step(&decision, step)?;
    let reviewer = decision.reviewer_id.clone();
    let verdict = decision.verdict;
    let updated = store.decide(&id, decision)?;
    tracing::info!(proposal = %id, reviewer = %reviewer, ?verdict, "decision recorded");
    Ok(Json(updated))
}

async fn progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(state.store().progress())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/candidates", get(list_candidates))
        .route("/api/candidates/{id}", get(candidate_detail))
        .route("/api/candidates/{id}/decision", post(post_decision))
        .route("/api/screenshots/{episode_id}/{step_id}", get(screenshot))
        .route("/api/progress", get(progress))
        .with_state(state)
}

/// A bound but not yet running review service.
pub struct ReviewServer {
    listener: TcpListener,
    app: Router,
}

impl ReviewServer {
    /// Binds immediately so an address already in use fails here, not later.
    pub async fn bind(state: Arc<AppState>, addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        Ok(Self {
            listener,
            app: router(state),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn serve(self) -> std::io::Result<()> {
        axum::serve(self.listener, self.app).await
    }

    pub async fn serve_until<F>(self, shutdown: F) -> std::io::Result<()>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        axum::serve(self.listener, self.app)
            .with_graceful_shutdown(shutdown)
            .await
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn serve_review_api(
    store: ProposalStore,
    dataset: Dataset,
    screenshot_root: impl Into<PathBuf>,
    addr: &str,
) -> std::io::Result<()> {
    let server = ReviewServer::bind(AppState::new(store, dataset, screenshot_root), addr).await?;
    tracing::info!(addr = %server.local_addr()?, "review API listening");
    server.serve().await
}
