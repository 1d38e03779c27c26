//! HTTP/JSON operator and ingestion API. Paths and payloads are listed in
//! `docs/api.md`.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::OperatingMode;
use crate::service::{MonitorService, RawEntry, RawSample, ServiceError, TimelineMetric};

/// Error body: `{"error": code, "message": text, "field": name?}`.
#[derive(Debug)]
pub enum ApiError {
    Service(ServiceError),
    Malformed(String),
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Service(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::Malformed(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::Malformed(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, field, message) = match self {
            ApiError::Malformed(m) => (StatusCode::BAD_REQUEST, "malformed", None, m),
            ApiError::Service(e) => {
                let message = e.to_string();
                match e {
                    ServiceError::Invalid { field, .. } => {
                        (StatusCode::UNPROCESSABLE_ENTITY, "invalid", Some(field), message)
                    }
                    ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None, message),
                    ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict", None, message),
                    ServiceError::Config(_) | ServiceError::Storage(_) => {
                        (StatusCode::INTERNAL_SERVER_ERROR, "internal", None, message)
                    }
                }
            }
        };
        let mut body = json!({ "error": code, "message": message });
        if let Some(f) = field {
            body["field"] = json!(f);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Svc = State<Arc<MonitorService>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowRequest {
    window_id: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptationRequest {
    cause_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeBody {
    mode: OperatingMode,
}

#[derive(Debug, Deserialize)]
struct TimelineQuery {
    metric: String,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
}

pub fn router(svc: Arc<MonitorService>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/v1/entries", post(post_entry))
        .route("/v1/samples", post(post_sample))
        .route("/v1/windows/close", post(close_window))
        .route("/v1/alerts", get(list_alerts))
        .route("/v1/alerts/{id}/ack", post(ack_alert))
        .route("/v1/reports/{window_id}", get(get_report))
        .route("/v1/pool", get(get_pool))
        .route("/v1/mode", get(get_mode).put(put_mode))
        .route("/v1/analysis", post(trigger_analysis))
        .route("/v1/adaptation", post(trigger_adaptation))
        .route("/v1/timeline", get(get_timeline))
        .route("/v1/events", get(get_events))
        .with_state(svc)
}

/// Runs a potentially long service call off the async workers.
async fn blocking<T, F>(svc: Arc<MonitorService>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&MonitorService) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::Service(ServiceError::Storage(format!("worker failed: {e}"))))?
        .map_err(ApiError::from)
}

async fn post_entry(State(svc): Svc, body: Result<Json<RawEntry>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(raw) = body?;
    let ack = svc.ingest_entry(raw)?;
    Ok((StatusCode::CREATED, Json(ack)))
}

async fn post_sample(State(svc): Svc, body: Result<Json<RawSample>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(raw) = body?;
    let ack = svc.ingest_sample(raw)?;
    Ok((StatusCode::CREATED, Json(ack)))
}

async fn close_window(State(svc): Svc, body: Result<Json<WindowRequest>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let out = blocking(svc, move |s| s.close_window(req.window_id)).await?;
    Ok(Json(out))
}

async fn list_alerts(State(svc): Svc) -> impl IntoResponse {
    Json(svc.alerts())
}

async fn ack_alert(State(svc): Svc, Path(id): Path<u64>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.acknowledge_alert(id)?))
}

async fn get_report(State(svc): Svc, Path(window_id): Path<u64>) -> ApiResult<impl IntoResponse> {
    let report = svc
        .report(window_id)
        .ok_or_else(|| ServiceError::NotFound(format!("report for window {window_id}")))?;
    Ok(Json(report))
}

async fn get_pool(State(svc): Svc) -> impl IntoResponse {
    Json(svc.pool_view())
}

async fn get_mode(State(svc): Svc) -> impl IntoResponse {
    Json(ModeBody { mode: svc.mode() })
}

async fn put_mode(State(svc): Svc, body: Result<Json<ModeBody>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let previous = svc.set_mode(req.mode);
    Ok(Json(json!({ "mode": req.mode, "previous": previous })))
}

async fn trigger_analysis(
    State(svc): Svc,
    body: Result<Json<WindowRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let out = blocking(svc, move |s| s.run_analysis(req.window_id)).await?;
    Ok(Json(out))
}

async fn trigger_adaptation(
    State(svc): Svc,
    body: Result<Json<AdaptationRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let out = blocking(svc, move |s| s.trigger_adaptation(&req.cause_ids)).await?;
    Ok(Json(out))
}

async fn get_timeline(
    State(svc): Svc,
    query: Result<Query<TimelineQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    let metric: TimelineMetric = q.metric.parse()?;
    Ok(Json(json!({ "metric": metric, "points": svc.timeline(metric) })))
}

async fn get_events(
    State(svc): Svc,
    query: Result<Query<EventsQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    Ok(Json(svc.events(q.since)))
}

/// Serves the API until the listener fails.
pub async fn serve(svc: Arc<MonitorService>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).await
}
