//! HTTP/JSON service over one immutable checkpoint.
//!
//! Every handler is a pure function of the request and the shared snapshot;
//! there is no mutable state and no locking. Field names are documented in
//! `API.md`.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use bias_lens::checkpoint::Checkpoint;
use bias_lens::data::{Skew, StyleMap};
use bias_lens::metrics::BiasReport;
use bias_lens::transfer::ZStats;
use serde::{Deserialize, Serialize};

use crate::ops;

/// Largest number of images per request.
pub const MAX_COUNT: usize = 64;
/// Request bodies above this size are rejected with 413.
pub const BODY_LIMIT: usize = 16 * 1024 * 1024;

pub struct AppState {
    pub checkpoint: Checkpoint,
    pub report: Option<BiasReport>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<bias_lens::Error> for ApiError {
    fn from(e: bias_lens::Error) -> Self {
        use bias_lens::Error as E;
        let status = match &e {
            E::ImageTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            E::UnknownDataset(_) | E::UnknownLabel(_) | E::Config(_) | E::Image(_) | E::Shape(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, message: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = if r.status() == StatusCode::PAYLOAD_TOO_LARGE { r.status() } else { StatusCode::BAD_REQUEST };
        Self { status, message: r.body_text() }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<AppState>>;

fn check_count(count: usize) -> Result<(), ApiError> {
    if count == 0 || count > MAX_COUNT {
        return Err(ApiError::bad_request(format!("count must be in 1..={MAX_COUNT}, got {count}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: usize,
    pub name: String,
    pub count: usize,
    pub style: StyleMap,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<Skew>,
}

#[derive(Serialize, Deserialize)]
pub struct DatasetsResponse {
    pub seed: u64,
    pub datasets: Vec<DatasetInfo>,
}

async fn datasets(State(state): Shared) -> Json<DatasetsResponse> {
    let registry = &state.checkpoint.registry;
    let datasets = registry
        .datasets
        .iter()
        .map(|d| DatasetInfo {
            id: d.id,
            name: d.name.clone(),
            count: d.count,
            style: d.style.clone(),
            description: d.style.describe(),
            skew: d.skew.clone(),
        })
        .collect();
    Json(DatasetsResponse { seed: registry.seed, datasets })
}

#[derive(Deserialize)]
struct SamplesQuery {
    dataset: String,
    #[serde(default = "default_count")]
    count: usize,
    #[serde(default)]
    seed: u64,
}

fn default_count() -> usize {
    16
}

#[derive(Serialize, Deserialize)]
pub struct RealSample {
    pub index: usize,
    pub png: String,
}

#[derive(Serialize, Deserialize)]
pub struct SamplesResponse {
    pub dataset: String,
    pub seed: u64,
    pub samples: Vec<RealSample>,
}

async fn samples(
    State(state): Shared,
    query: Result<Query<SamplesQuery>, QueryRejection>,
) -> ApiResult<SamplesResponse> {
    let Query(q) = query?;
    check_count(q.count)?;
    let registry = &state.checkpoint.registry;
    let samples = ops::pick_indices(registry, &q.dataset, q.count, q.seed)?
        .into_iter()
        .map(|index| Ok(RealSample { index, png: BASE64.encode(ops::dataset_png(registry, &q.dataset, index)?) }))
        .collect::<Result<_, ApiError>>()?;
    Ok(Json(SamplesResponse { dataset: q.dataset, seed: q.seed, samples }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRef {
    pub dataset: String,
    pub index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectRequest {
    /// Base64 PNG.
    #[serde(default)]
    pub pixels: Option<String>,
    #[serde(default)]
    pub sample_ref: Option<SampleRef>,
    /// Defaults to the dataset of `sample_ref`.
    #[serde(default)]
    pub from: Option<String>,
    pub to: String,
}

#[derive(Serialize, Deserialize)]
pub struct ProjectResponse {
    pub from: String,
    pub to: String,
    pub pixels: String,
    pub z_stats: ZStats,
    pub resized: bool,
}

async fn project(
    State(state): Shared,
    body: Result<Json<ProjectRequest>, JsonRejection>,
) -> ApiResult<ProjectResponse> {
    let Json(req) = body?;
    let registry = &state.checkpoint.registry;
    let (png, from) = match (req.pixels, req.sample_ref) {
        (Some(b64), None) => {
            let png =
                BASE64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("pixels: invalid base64: {e}")))?;
            let from = req.from.ok_or_else(|| ApiError::bad_request("`from` is required with `pixels`"))?;
            (png, from)
        }
        (None, Some(r)) => (ops::dataset_png(registry, &r.dataset, r.index)?, req.from.unwrap_or(r.dataset)),
        _ => return Err(ApiError::bad_request("exactly one of `pixels` and `sample_ref` is required")),
    };
    let out = ops::project_png(&state.checkpoint, &png, &from, &req.to)?;
    Ok(Json(ProjectResponse {
        from,
        to: req.to,
        pixels: BASE64.encode(&out.png),
        z_stats: out.z_stats,
        resized: out.resized,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRequest {
    pub dataset: String,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct SampleResponse {
    pub dataset: String,
    pub seed: u64,
    pub images: Vec<String>,
}

async fn sample(State(state): Shared, body: Result<Json<SampleRequest>, JsonRejection>) -> ApiResult<SampleResponse> {
    let Json(req) = body?;
    check_count(req.count)?;
    let images = ops::sample_pngs(&state.checkpoint, &req.dataset, req.count, req.seed)?;
    Ok(Json(SampleResponse {
        dataset: req.dataset,
        seed: req.seed,
        images: images.iter().map(|png| BASE64.encode(png)).collect(),
    }))
}

async fn report(State(state): Shared) -> Result<Json<BiasReport>, ApiError> {
    match &state.report {
        Some(r) => Ok(Json(r.clone())),
        None => Err(ApiError { status: StatusCode::NOT_FOUND, message: "no report is loaded".into() }),
    }
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, message: "no such endpoint".into() }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/datasets", get(datasets))
        .route("/api/samples", get(samples))
        .route("/api/project", post(project))
        .route("/api/sample", post(sample))
        .route("/api/report", get(report))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves `state` on `addr` until interrupted.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
