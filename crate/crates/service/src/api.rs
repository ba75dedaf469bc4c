//! `/api/v1` routes. Reads share the project; mutations take it exclusively;
//! retraining runs on its own thread, one job at a time.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use labelsynth::annotation::{AnnotationRecord, CandidateStatus};
use labelsynth::selection::BandParams;

use crate::project::{now_unix, uncertainty_png, Phase, Project, ProjectError, RetrainPlan};

/// Every route, as listed in `api/v1.json`.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/api/v1/project"),
    ("PUT", "/api/v1/project/selection"),
    ("GET", "/api/v1/rounds"),
    ("GET", "/api/v1/rounds/{round}"),
    ("GET", "/api/v1/rounds/{round}/candidates/{id}/image"),
    ("GET", "/api/v1/rounds/{round}/candidates/{id}/overlay"),
    ("GET", "/api/v1/rounds/{round}/candidates/{id}/uncertainty"),
    ("GET", "/api/v1/rounds/{round}/candidates/{id}/report"),
    ("POST", "/api/v1/rounds/{round}/candidates/{id}/accept"),
    ("POST", "/api/v1/rounds/{round}/candidates/{id}/skip"),
    ("GET", "/api/v1/rounds/{round}/candidates/{id}/annotation"),
    ("POST", "/api/v1/rounds/{round}/candidates/{id}/annotation"),
    ("GET", "/api/v1/rounds/{round}/candidates/{id}/mask"),
    ("GET", "/api/v1/retrain"),
    ("POST", "/api/v1/retrain"),
    ("GET", "/api/v1/metrics"),
];

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

impl From<ProjectError> for ApiError {
    fn from(e: ProjectError) -> Self {
        let code = e.code();
        let status = match code {
            "unknown_round" | "unknown_candidate" | "no_annotation" | "no_ensemble" | "no_image" => {
                StatusCode::NOT_FOUND
            }
            "round_closed" | "invalid_transition" | "accept_limit" | "stale_round" | "locked" => StatusCode::CONFLICT,
            "invalid_annotation" | "sample_mismatch" | "no_annotations" | "round_not_grown" | "invalid_config"
            | "selection_failed" | "unsupported_task" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(message: String) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        code: "bad_request",
        message,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JobStatus {
    pub id: u64,
    pub state: JobState,
    pub phase: Option<Phase>,
    pub parent_round: u32,
    pub samples: usize,
    /// Round proposed by the job, once it succeeds.
    pub round: Option<u32>,
    pub error: Option<ErrorBody>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

pub struct AppState {
    project: RwLock<Project>,
    job: Mutex<Option<JobStatus>>,
}

impl AppState {
    pub fn new(project: Project) -> Arc<Self> {
        Arc::new(Self {
            project: RwLock::new(project),
            job: Mutex::new(None),
        })
    }

    pub fn job(&self) -> Option<JobStatus> {
        self.job.lock().expect("job poisoned").clone()
    }
}

async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
{
    let s = state.clone();
    tokio::task::spawn_blocking(move || f(&s)).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: e.to_string(),
    })?
}

async fn read<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Project) -> Result<T, ProjectError> + Send + 'static,
{
    blocking(state, move |s| Ok(f(&s.project.read().expect("project poisoned"))?)).await
}

async fn write<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Project) -> Result<T, ProjectError> + Send + 'static,
{
    blocking(state, move |s| Ok(f(&mut s.project.write().expect("project poisoned"))?)).await
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    let candidate = "/api/v1/rounds/{round}/candidates/{id}";
    Router::new()
        .route("/api/v1/project", get(project_info))
        .route("/api/v1/project/selection", put(set_selection))
        .route("/api/v1/rounds", get(list_rounds))
        .route("/api/v1/rounds/{round}", get(get_round))
        .route(&format!("{candidate}/image"), get(candidate_image))
        .route(&format!("{candidate}/overlay"), get(candidate_overlay))
        .route(&format!("{candidate}/uncertainty"), get(candidate_uncertainty))
        .route(&format!("{candidate}/report"), get(candidate_report))
        .route(&format!("{candidate}/accept"), post(accept))
        .route(&format!("{candidate}/skip"), post(skip))
        .route(&format!("{candidate}/annotation"), get(get_annotation).post(submit_annotation))
        .route(&format!("{candidate}/mask"), get(annotation_mask))
        .route("/api/v1/retrain", get(retrain_status).post(start_retrain))
        .route("/api/v1/metrics", get(metrics))
        .with_state(state)
}

async fn project_info(State(s): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    read(&s, |p| {
        Ok(json!({
            "config": p.config(),
            "schema": p.schema(),
            "current_round": p.current_round(),
        }))
    })
    .await
    .map(Json)
}

async fn set_selection(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<BandParams>> {
    let params: BandParams = serde_json::from_slice(&body).map_err(|e| bad_request(e.to_string()))?;
    write(&s, move |p| {
        p.set_selection(params)?;
        Ok(p.config().selection)
    })
    .await
    .map(Json)
}

async fn list_rounds(State(s): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    read(&s, |p| Ok(json!({ "rounds": p.summaries() }))).await.map(Json)
}

async fn get_round(State(s): State<Arc<AppState>>, Path(round): Path<u32>) -> ApiResult<Json<serde_json::Value>> {
    read(&s, move |p| Ok(serde_json::to_value(p.round(round)?).expect("round state serializes")))
        .await
        .map(Json)
}

async fn candidate_image(State(s): State<Arc<AppState>>, Path((round, id)): Path<(u32, u64)>) -> ApiResult<Response> {
    read(&s, move |p| p.candidate_image(round, id)).await.map(png)
}

async fn candidate_overlay(State(s): State<Arc<AppState>>, Path((round, id)): Path<(u32, u64)>) -> ApiResult<Response> {
    read(&s, move |p| p.candidate_overlay(round, id)).await.map(png)
}

async fn candidate_uncertainty(
    State(s): State<Arc<AppState>>,
    Path((round, id)): Path<(u32, u64)>,
) -> ApiResult<Response> {
    read(&s, move |p| Ok(uncertainty_png(&p.candidate_uncertainty(round, id)?)?))
        .await
        .map(png)
}

async fn candidate_report(State(s): State<Arc<AppState>>, Path((round, id)): Path<(u32, u64)>) -> ApiResult<Response> {
    read(&s, move |p| p.candidate_uncertainty(round, id))
        .await
        .map(|r| Json(r).into_response())
}

async fn transition(s: Arc<AppState>, round: u32, id: u64, to: CandidateStatus) -> ApiResult<Json<serde_json::Value>> {
    write(&s, move |p| {
        let state = p.set_status(round, id, to)?;
        Ok(json!({ "id": id, "status": to, "accepted": state.accepted_count() }))
    })
    .await
    .map(Json)
}

async fn accept(State(s): State<Arc<AppState>>, Path((round, id)): Path<(u32, u64)>) -> ApiResult<Json<serde_json::Value>> {
    transition(s, round, id, CandidateStatus::Accepted).await
}

async fn skip(State(s): State<Arc<AppState>>, Path((round, id)): Path<(u32, u64)>) -> ApiResult<Json<serde_json::Value>> {
    transition(s, round, id, CandidateStatus::Skipped).await
}

async fn get_annotation(
    State(s): State<Arc<AppState>>,
    Path((round, id)): Path<(u32, u64)>,
) -> ApiResult<Json<AnnotationRecord>> {
    read(&s, move |p| {
        p.round(round)?;
        p.annotation(id)
    })
    .await
    .map(Json)
}

async fn submit_annotation(
    State(s): State<Arc<AppState>>,
    Path((round, id)): Path<(u32, u64)>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<AnnotationRecord>)> {
    let record: AnnotationRecord = serde_json::from_slice(&body).map_err(|e| bad_request(e.to_string()))?;
    write(&s, move |p| p.submit_annotation(round, id, record))
        .await
        .map(|r| (StatusCode::CREATED, Json(r)))
}

async fn annotation_mask(State(s): State<Arc<AppState>>, Path((round, id)): Path<(u32, u64)>) -> ApiResult<Response> {
    read(&s, move |p| {
        p.round(round)?;
        p.annotation_mask_png(id)
    })
    .await
    .map(png)
}

async fn metrics(State(s): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    read(&s, |p| Ok(serde_json::to_value(p.metrics()?).expect("metrics serialize")))
        .await
        .map(Json)
}

async fn retrain_status(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "job": s.job() }))
}

async fn start_retrain(State(s): State<Arc<AppState>>) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let state = s.clone();
    let status = tokio::task::spawn_blocking(move || -> ApiResult<JobStatus> {
        let mut job = state.job.lock().expect("job poisoned");
        if let Some(j) = job.as_ref().filter(|j| j.state == JobState::Running) {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                code: "retrain_in_flight",
                message: format!("retrain job {} is still running", j.id),
            });
        }
        let plan = state.project.read().expect("project poisoned").prepare_retrain()?;
        let status = JobStatus {
            id: job.as_ref().map_or(1, |j| j.id + 1),
            state: JobState::Running,
            phase: None,
            parent_round: plan.parent_round(),
            samples: plan.sample_count(),
            round: None,
            error: None,
            started_at: now_unix(),
            finished_at: None,
        };
        *job = Some(status.clone());
        drop(job);
        let worker = state.clone();
        std::thread::spawn(move || run_job(worker, plan));
        Ok(status)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: e.to_string(),
    })??;
    Ok((StatusCode::ACCEPTED, Json(status)))
}

fn run_job(state: Arc<AppState>, plan: RetrainPlan) {
    let update = |f: &dyn Fn(&mut JobStatus)| {
        if let Some(j) = state.job.lock().expect("job poisoned").as_mut() {
            f(j);
        }
    };
    let result = plan
        .run(&|phase| update(&|j| j.phase = Some(phase)))
        .and_then(|out| {
            let mut project = state.project.write().expect("project poisoned");
            project.commit(out).map(|r| r.round)
        });
    update(&|j| {
        j.finished_at = Some(now_unix());
        match &result {
            Ok(round) => {
                j.state = JobState::Succeeded;
                j.round = Some(*round);
            }
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(ErrorBody {
                    code: e.code(),
                    message: e.to_string(),
                });
            }
        }
    });
}

/// Serves `project` on `addr` until the process is stopped.
pub fn serve_blocking(project: Project, addr: SocketAddr) -> std::io::Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("serving {} on http://{}", project.dir().display(), listener.local_addr()?);
        axum::serve(listener, router(AppState::new(project))).await
    })
}
