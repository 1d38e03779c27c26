//! Contract tests for the HTTP API: paths, status codes and payload field
//! names are frozen here and in `docs/api.md`.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::*;
use driftwatch_service::api::router;
use driftwatch_service::OperatingMode;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(mode: OperatingMode) -> Router {
    router(Arc::new(service(mode)))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn raw(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(Method::POST)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn keys(v: &Value) -> BTreeSet<&str> {
    v.as_object().unwrap().keys().map(String::as_str).collect()
}

fn set<'a>(names: &[&'a str]) -> BTreeSet<&'a str> {
    names.iter().copied().collect()
}

async fn load_example(app: &Router) {
    for e in example_entries() {
        let (status, _) = call(app, Method::POST, "/v1/entries", Some(serde_json::to_value(e).unwrap())).await;
        assert_eq!(status, StatusCode::CREATED);
    }
}

#[tokio::test]
async fn health() {
    let (status, body) = call(&app(OperatingMode::Manual), Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok"}));
}

#[tokio::test]
async fn entry_ingestion_contract() {
    let app = app(OperatingMode::Manual);
    let body = json!({
        "timestamp": DAY0 + 60,
        "device_id": "android_21",
        "model_version_id": "clean",
        "location": "New York",
        "drift": true,
        "attributes": {"weather": "snow"}
    });
    let (status, ack) = call(&app, Method::POST, "/v1/entries", Some(body.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(ack, json!({"id": 0, "window_id": 0}));

    // attributes are optional; weather falls back to the provider
    let mut no_attrs = body.clone();
    no_attrs.as_object_mut().unwrap().remove("attributes");
    no_attrs["timestamp"] = json!(DAY0 + 120);
    let (status, ack) = call(&app, Method::POST, "/v1/entries", Some(no_attrs)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(ack["id"], 1);

    let (status, err) = raw(&app, "/v1/entries", "{\"timestamp\": ").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "malformed");

    let mut missing = body.clone();
    missing.as_object_mut().unwrap().remove("drift");
    let (status, err) = call(&app, Method::POST, "/v1/entries", Some(missing)).await;
    assert!(status.is_client_error());
    assert_eq!(err["error"], "malformed");

    let mut extra = body.clone();
    extra["timestamp"] = json!(DAY0 + 180);
    extra["attributes"]["os"] = json!("android");
    let (status, err) = call(&app, Method::POST, "/v1/entries", Some(extra)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(keys(&err), set(&["error", "message", "field"]));
    assert_eq!(err["error"], "invalid");
    assert_eq!(err["field"], "os");

    let (_, counts) = call(&app, Method::GET, "/v1/timeline?metric=entries", None).await;
    assert_eq!(counts["points"][0]["value"], 2.0, "rejected entries leave the log unchanged");
}

#[tokio::test]
async fn sample_ingestion_contract() {
    let app = app(OperatingMode::Manual);
    let s = samples(1, "Quebec", "snow", 2, 4);
    let (status, ack) = call(&app, Method::POST, "/v1/samples", Some(serde_json::to_value(&s[0]).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(ack, json!({"window_id": 1, "buffered": 1}));
    let mut bad = serde_json::to_value(&s[1]).unwrap();
    bad["features"] = json!([1.0, 2.0]);
    let (status, err) = call(&app, Method::POST, "/v1/samples", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "features");
}

#[tokio::test]
async fn manual_analysis_report_and_alert_contract() {
    let app = app(OperatingMode::Manual);
    load_example(&app).await;

    let (status, _) = call(&app, Method::POST, "/v1/analysis", Some(json!({"window_id": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "window not closed yet");

    let (status, closed) = call(&app, Method::POST, "/v1/windows/close", Some(json!({"window_id": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(keys(&closed), set(&["window_id", "already_closed", "analysis"]));
    assert_eq!(closed["analysis"], Value::Null);

    let (status, out) = call(&app, Method::POST, "/v1/analysis", Some(json!({"window_id": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(keys(&out), set(&["report", "alert", "adaptation"]));
    let report = &out["report"];
    assert_eq!(
        keys(report),
        set(&[
            "window_id", "mode", "thresholds", "causes", "matched_counts", "table", "clean_entries", "entries",
            "drifted", "elapsed_ms"
        ])
    );
    let cause = &report["causes"][0];
    assert_eq!(
        keys(cause),
        set(&["itemset", "occurrence", "support", "confidence", "risk_ratio", "matched", "matched_drift", "rank"])
    );
    assert_eq!(cause["itemset"], json!({"weather": "snow"}));
    assert_eq!(cause["risk_ratio"], json!(3.0));
    assert_eq!(report["causes"].as_array().unwrap().len(), 1);
    assert_eq!(report["mode"], "full");

    let alert = &out["alert"];
    assert_eq!(keys(alert), set(&["id", "window_id", "causes", "created_at", "state"]));
    assert_eq!(alert["state"], "open");
    assert_eq!(alert["causes"][0]["cause_id"], "w0-c0");

    let (status, again) = call(&app, Method::POST, "/v1/analysis", Some(json!({"window_id": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(again["error"], "conflict");

    let (status, fetched) = call(&app, Method::GET, "/v1/reports/0", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched["causes"], report["causes"]);
    let (status, missing) = call(&app, Method::GET, "/v1/reports/9", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(missing["error"], "not_found");

    let (_, alerts) = call(&app, Method::GET, "/v1/alerts", None).await;
    assert_eq!(alerts.as_array().unwrap().len(), 1);
    let (status, acked) = call(&app, Method::POST, "/v1/alerts/1/ack", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(acked["state"], "acknowledged");
    let (status, _) = call(&app, Method::POST, "/v1/alerts/7/ack", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, Method::POST, "/v1/adaptation", Some(json!({"cause_ids": ["w0-c5"]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, starved) = call(&app, Method::POST, "/v1/adaptation", Some(json!({"cause_ids": ["w0-c0"]}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(keys(&starved), set(&["created", "skipped", "evicted", "pool_generation"]));
    assert_eq!(starved["skipped"][0]["cause_id"], "w0-c0");
    assert_eq!(starved["created"], json!([]));
}

#[tokio::test]
async fn mode_pool_timeline_and_events_contract() {
    let app = app(OperatingMode::Autopilot);
    let (status, mode) = call(&app, Method::GET, "/v1/mode", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(mode, json!({"mode": "autopilot"}));

    let (status, _) = call(&app, Method::POST, "/v1/adaptation", Some(json!({"cause_ids": ["w0-c0"]}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "operator adaptation is manual-mode only");

    let (status, changed) = call(&app, Method::PUT, "/v1/mode", Some(json!({"mode": "manual"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(changed, json!({"mode": "manual", "previous": "autopilot"}));
    let (status, _) = call(&app, Method::PUT, "/v1/mode", Some(json!({"mode": "cruise"}))).await;
    assert!(status.is_client_error());

    let (status, pool) = call(&app, Method::GET, "/v1/pool", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(keys(&pool), set(&["generation", "capacity", "subsumption", "versions"]));
    assert_eq!(pool["capacity"], 4);
    assert_eq!(pool["subsumption"], "coverage");
    let clean = &pool["versions"][0];
    assert_eq!(keys(clean), set(&["version_id", "cause", "last_updated", "risk_ratio"]));
    assert_eq!(clean["version_id"], "clean");
    assert_eq!(clean["cause"], json!({}));
    assert_eq!(clean["risk_ratio"], Value::Null);

    load_example(&app).await;
    let (status, tl) = call(&app, Method::GET, "/v1/timeline?metric=drift_rate", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(tl["metric"], "drift_rate");
    let point = &tl["points"][0];
    assert_eq!(keys(point), set(&["window_id", "start", "end", "value"]));
    assert_eq!(point["value"], json!(0.6));
    let (status, err) = call(&app, Method::GET, "/v1/timeline?metric=latency", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "metric");
    let (status, _) = call(&app, Method::GET, "/v1/timeline", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, events) = call(&app, Method::GET, "/v1/events", None).await;
    assert_eq!(status, StatusCode::OK);
    let first = &events[0];
    assert_eq!(keys(first), set(&["seq", "kind", "from", "to"]));
    assert_eq!(first["kind"], "mode_changed");
    let (_, later) = call(&app, Method::GET, "/v1/events?since=1", None).await;
    assert_eq!(later.as_array().unwrap().len(), events.as_array().unwrap().len() - 1);
}

#[tokio::test]
async fn autopilot_close_runs_the_whole_loop() {
    let app = app(OperatingMode::Autopilot);
    load_example(&app).await;
    for s in samples(0, "Helsinki", "snow", 40, 8) {
        let (status, _) = call(&app, Method::POST, "/v1/samples", Some(serde_json::to_value(s).unwrap())).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (status, closed) = call(&app, Method::POST, "/v1/windows/close", Some(json!({"window_id": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    let created = &closed["analysis"]["adaptation"]["created"];
    assert_eq!(created.as_array().unwrap().len(), 1);
    assert_eq!(created[0]["cause"], json!({"weather": "snow"}));
    assert_eq!(closed["analysis"]["alert"]["state"], "adapted");

    let (_, pool) = call(&app, Method::GET, "/v1/pool", None).await;
    assert_eq!(pool["generation"], 1);
    assert_eq!(pool["versions"][0]["cause"], json!({"weather": "snow"}));
    assert_eq!(pool["versions"][0]["risk_ratio"], json!(3.0));

    let (_, again) = call(&app, Method::POST, "/v1/windows/close", Some(json!({"window_id": 0}))).await;
    assert_eq!(again["already_closed"], true);
    assert_eq!(again["analysis"], Value::Null);
}
