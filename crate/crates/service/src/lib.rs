//! HTTP API: dataset uploads, asynchronous analysis jobs and histogram data.

pub mod datasets;
pub mod error;
pub mod jobs;
mod persist;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use domainsat_core::algorithms::catalog;
use domainsat_core::pipeline::{feature_histogram, HistogramSource, DEFAULT_HISTOGRAM_BINS, SELECTOR_P_POSITIVE};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::datasets::{DatasetKind, DatasetStore, Loaded};
use crate::error::{ApiError, ApiResult};
use crate::jobs::{JobRecord, JobRequest, JobStatus, JobStore};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// Concurrent job limit; defaults to the CPU count.
    pub workers: usize,
    /// Built UI bundle served at `/`, if any.
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            static_dir: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    datasets: Arc<DatasetStore>,
    jobs: Arc<JobStore>,
    pool: Arc<Semaphore>,
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> std::io::Result<Self> {
        Ok(AppState {
            datasets: Arc::new(DatasetStore::open(&config.data_dir)?),
            jobs: Arc::new(JobStore::open(&config.data_dir)?),
            pool: Arc::new(Semaphore::new(config.workers.max(1))),
        })
    }
}

pub fn router(config: &ServiceConfig, state: AppState) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/algorithms", get(algorithms))
        .route("/api/datasets", get(list_datasets).post(upload_dataset))
        .route("/api/datasets/{id}", get(get_dataset).delete(delete_dataset))
        .route("/api/datasets/{id}/histogram", get(histogram))
        .route("/api/jobs", get(list_jobs).post(create_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/result", get(job_result))
        .layer(DefaultBodyLimit::max(config.max_upload_bytes))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") }),
    }
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(config, listener).await
}

pub async fn serve_listener(config: ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let state = AppState::open(&config)?;
    axum::serve(listener, router(&config, state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn algorithms() -> Json<Value> {
    Json(json!({ "algorithms": catalog() }))
}

async fn list_datasets(State(s): State<AppState>) -> impl IntoResponse {
    Json(json!({ "datasets": s.datasets.list() }))
}

async fn get_dataset(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.datasets.get(&id)?))
}

async fn delete_dataset(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.datasets.delete(&id)?))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "bad_request" };
    ApiError::new(status, code, e.body_text())
}

async fn upload_dataset(State(s): State<AppState>, mut form: Multipart) -> ApiResult<impl IntoResponse> {
    let (mut file, mut kind, mut name, mut file_name) = (None, None, None, None);
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        match field.name().unwrap_or_default() {
            "file" => {
                file_name = field.file_name().map(str::to_string);
                file = Some(field.bytes().await.map_err(multipart_error)?);
            }
            "kind" => kind = Some(field.text().await.map_err(multipart_error)?),
            "name" => name = Some(field.text().await.map_err(multipart_error)?),
            _ => {}
        }
    }
    let file = file.ok_or_else(|| ApiError::bad_request("missing 'file' field"))?;
    let kind: DatasetKind = kind.ok_or_else(|| ApiError::bad_request("missing 'kind' field"))?.parse()?;
    let name = name.or(file_name).unwrap_or_else(|| "dataset".into());
    let store = Arc::clone(&s.datasets);
    let record = tokio::task::spawn_blocking(move || store.insert(&name, kind, &file))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Debug, Deserialize)]
struct HistogramQuery {
    selector: Option<String>,
    bins: Option<usize>,
    compare_with: Option<String>,
    #[serde(default)]
    normalized: bool,
}

async fn histogram(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<HistogramQuery>) -> ApiResult<impl IntoResponse> {
    let mut loaded = vec![s.datasets.load(&id)?];
    if let Some(other) = &q.compare_with {
        loaded.push(s.datasets.load(other)?);
    }
    let selector = match (&q.selector, loaded[0].1.as_ref()) {
        (Some(sel), _) => sel.clone(),
        (None, Loaded::Predictions(_)) => SELECTOR_P_POSITIVE.to_string(),
        (None, Loaded::Features(m)) => m.feature_names()[0].clone(),
    };
    // group keys must stay distinct even when a dataset is compared with itself
    let mut seen: HashMap<String, usize> = HashMap::new();
    let groups: Vec<(String, HistogramSource<'_>)> = loaded
        .iter()
        .map(|(record, data)| {
            let n = seen.entry(record.name.clone()).or_default();
            *n += 1;
            let key = if *n == 1 { record.name.clone() } else { format!("{} ({})", record.name, n) };
            let src = match data.as_ref() {
                Loaded::Features(m) => HistogramSource::Features(m),
                Loaded::Predictions(p) => HistogramSource::Predictions(p),
            };
            (key, src)
        })
        .collect();
    let summary = feature_histogram(&groups, &selector, q.bins.unwrap_or(DEFAULT_HISTOGRAM_BINS), q.normalized)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string()))?;
    Ok(Json(summary))
}

async fn list_jobs(State(s): State<AppState>) -> impl IntoResponse {
    Json(json!({ "jobs": s.jobs.list() }))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    Ok(Json(s.jobs.get(&id)?))
}

async fn job_result(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = s.jobs.get(&id)?;
    match (job.status, job.result) {
        (JobStatus::Done, Some(result)) => Ok(Json(result)),
        (JobStatus::Error, _) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "job_failed",
            job.error.unwrap_or_else(|| "job failed".into()),
        )),
        (status, _) => Err(ApiError::new(StatusCode::CONFLICT, "job_not_done", format!("job is {status:?}").to_lowercase())),
    }
}

fn parse_request(body: &[u8]) -> ApiResult<JobRequest> {
    serde_json::from_slice(body).map_err(|e| {
        if e.is_data() {
            ApiError::unprocessable(e.to_string())
        } else {
            ApiError::bad_request(format!("malformed JSON: {e}"))
        }
    })
}

async fn create_job(State(s): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let request = parse_request(&body)?;
    let store = Arc::clone(&s.datasets);
    let req = request.clone();
    let prepared = tokio::task::spawn_blocking(move || jobs::prepare(&store, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;

    let record = s.jobs.create(request.clone());
    let (registry, pool, id) = (Arc::clone(&s.jobs), Arc::clone(&s.pool), record.id.clone());
    tokio::spawn(async move {
        let Ok(_permit) = pool.acquire_owned().await else { return };
        registry.mark_running(&id);
        let outcome = tokio::task::spawn_blocking(move || jobs::execute(&request, &prepared))
            .await
            .map_err(|e| format!("job panicked: {e}"))
            .and_then(|r| r.map_err(|e| e.to_string()));
        registry.finish(&id, outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(record)))
}
