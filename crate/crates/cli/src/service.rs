//! HTTP service: parsing, local-action candidates and asynchronous
//! generation jobs over a read-only model registry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use actionguide::pipeline::{Models, Precision, DEFAULT_RHO};
use actionguide::vae::LatentEmbedding;
use actionguide::Error;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::app::{self, ActionCandidates, ErrorBody, ErrorEnvelope, GenerateRequest, MotionDocument};

pub const DEFAULT_QUEUE_CAPACITY: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    SampleAction,
    Evaluate,
}

/// Ordered so that a job only ever moves to a larger status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub motion_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub request: GenerateRequest,
    pub result: Option<JobResult>,
    pub error: Option<ErrorBody>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Default)]
struct Store {
    jobs: HashMap<String, JobRecord>,
    motions: HashMap<String, MotionDocument>,
    candidates: HashMap<String, LatentEmbedding>,
    counter: u64,
}

impl Store {
    fn next_id(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}-{}", self.counter)
    }

    fn active(&self) -> usize {
        self.jobs.values().filter(|j| j.status < JobStatus::Done).count()
    }

    fn advance(&mut self, id: &str, status: JobStatus) {
        if let Some(job) = self.jobs.get_mut(id) {
            if status > job.status {
                job.status = status;
                job.updated_ms = now_ms();
            }
        }
    }
}

pub struct AppState {
    models: Option<Arc<Models>>,
    precision: Precision,
    queue_capacity: usize,
    store: Mutex<Store>,
}

impl AppState {
    /// Parameters are rounded once here when serving at 32-bit precision.
    pub fn new(models: Option<Models>, precision: Precision, queue_capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            models: models.map(|m| Arc::new(m.with_precision(precision))),
            precision,
            queue_capacity,
            store: Mutex::new(Store::default()),
        })
    }

    fn store(&self) -> MutexGuard<'_, Store> {
        // A panicking job cannot leave the maps half-written, so keep serving.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn models(&self) -> Result<Arc<Models>, ApiError> {
        self.models.clone().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "models_not_loaded", "no models are loaded"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody::new(code, message) }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_client_error() { StatusCode::BAD_REQUEST } else { StatusCode::INTERNAL_SERVER_ERROR };
        Self { status, body: ErrorBody::from(&e) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorEnvelope { error: &self.body })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body parsing with the service's error envelope instead of axum's
/// plain-text rejections.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/parse", post(parse))
        .route("/actions/sample", post(sample_actions))
        .route("/generate", post(generate))
        .route("/jobs/{id}", get(job))
        .route("/motions/{id}", get(motion))
        .with_state(state)
}

async fn healthz(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "models_loaded": s.models.is_some(), "precision": s.precision }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParseBody {
    text: String,
    #[serde(default)]
    rho: Option<f64>,
    #[serde(default)]
    weight_multipliers: Option<Vec<f64>>,
}

async fn parse(State(s): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<app::ParseResponse>> {
    let req: ParseBody = body(&bytes)?;
    let models = s.models.clone();
    let out = app::parse_text(models.as_deref(), &req.text, req.rho.unwrap_or(DEFAULT_RHO), req.weight_multipliers.as_deref())?;
    Ok(Json(out))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleBody {
    text: String,
    #[serde(default = "one")]
    seeds: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    steps: Option<[usize; 3]>,
}

fn one() -> usize {
    1
}

#[derive(Serialize)]
struct SampleResponse {
    actions: Vec<ActionCandidates>,
}

async fn sample_actions(State(s): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<SampleResponse>> {
    let req: SampleBody = body(&bytes)?;
    if req.text.trim().is_empty() {
        return Err(Error::EmptyText.into());
    }
    let models = s.models()?;
    let state = s.clone();
    let actions = tokio::task::spawn_blocking(move || {
        let actions = app::sample_actions(&models, &req.text, req.seeds, req.seed, req.steps, state.precision, || state.store().next_id("cand"))?;
        let mut store = state.store();
        for c in actions.iter().flat_map(|a| &a.candidates) {
            store.candidates.insert(c.id.clone(), c.latent.clone());
        }
        Ok::<_, Error>(actions)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(SampleResponse { actions }))
}

fn run_job(state: &AppState, models: &Models, id: &str, request: &GenerateRequest, refs: Option<&[LatentEmbedding]>) {
    state.store().advance(id, JobStatus::Running);
    let outcome = app::generate(models, request, refs, state.precision);
    let mut store = state.store();
    match outcome {
        Ok(doc) => {
            let motion_id = store.next_id("motion");
            store.motions.insert(motion_id.clone(), doc);
            if let Some(job) = store.jobs.get_mut(id) {
                job.result = Some(JobResult { motion_id });
            }
            store.advance(id, JobStatus::Done);
        }
        Err(e) => {
            if let Some(job) = store.jobs.get_mut(id) {
                job.error = Some(ErrorBody::from(&e));
            }
            store.advance(id, JobStatus::Failed);
        }
    }
}

async fn generate(State(s): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Response> {
    let request: GenerateRequest = body(&bytes)?;
    if request.text.trim().is_empty() {
        return Err(Error::EmptyText.into());
    }
    let models = s.models()?;
    let (id, refs) = {
        let mut store = s.store();
        if store.active() >= s.queue_capacity {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_full", format!("{} jobs already pending", s.queue_capacity)));
        }
        let refs = match (&request.selected_action_ids, &request.refs) {
            (Some(_), Some(_)) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", "give either selected_action_ids or refs")),
            (Some(ids), None) => Some(ids.iter().map(|id| store.candidates.get(id).cloned().ok_or_else(|| ApiError::not_found("candidate", id))).collect::<ApiResult<Vec<_>>>()?),
            (None, r) => r.clone(),
        };
        let id = store.next_id("job");
        let t = now_ms();
        store.jobs.insert(
            id.clone(),
            JobRecord { id: id.clone(), kind: JobKind::Generate, status: JobStatus::Queued, request: request.clone(), result: None, error: None, created_ms: t, updated_ms: t },
        );
        (id, refs)
    };
    let state = s.clone();
    let job_id = id.clone();
    let wait = request.wait;
    let task = tokio::task::spawn_blocking(move || run_job(&state, &models, &job_id, &request, refs.as_deref()));
    if wait {
        task.await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        let record = s.store().jobs.get(&id).cloned().ok_or_else(|| ApiError::not_found("job", &id))?;
        return Ok((StatusCode::OK, Json(record)).into_response());
    }
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id, "status": JobStatus::Queued }))).into_response())
}

async fn job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    s.store().jobs.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

async fn motion(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<MotionDocument>> {
    s.store().motions.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found("motion", &id))
}
