mod common;

use std::sync::OnceLock;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use cmdrec_core::logs::{parse_log_line, LineOutcome, LogSchema};
use cmdrec_service::commands::load_state;
use cmdrec_service::http::{router, AppState, PollerOptions, PredictResponse, SessionView, VocabRow};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture() -> &'static common::Fixture {
    static F: OnceLock<common::Fixture> = OnceLock::new();
    F.get_or_init(|| common::trained_fixture(3))
}

fn state() -> AppState {
    let f = fixture();
    load_state(&f.data, &f.checkpoint, None, None, PollerOptions::default()).unwrap()
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn ingest_text(state: &AppState, text: &str) {
    let records: Vec<_> = text
        .lines()
        .filter_map(|l| match parse_log_line(l, &LogSchema::default()) {
            Ok(LineOutcome::Record(r)) => Some(r),
            _ => None,
        })
        .collect();
    state.sessions.lock().unwrap().ingest(&records);
}

#[tokio::test]
async fn health_and_vocab() {
    let s = state();
    let (code, body) = call(&s, "GET", "/health", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["sessions"], 0);
    assert!(body["model"].as_str().unwrap().contains("clm"));
    let (code, body) = call(&s, "GET", "/vocab", None).await;
    assert_eq!(code, StatusCode::OK);
    let rows: Vec<VocabRow> = serde_json::from_value(body).unwrap();
    let mut names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
    names.sort();
    assert_eq!(names, ["Door", "Slab", "Wall", "Window"]);
}

#[tokio::test]
async fn planted_successor_ranks_first() {
    let s = state();
    for (name, _) in common::CYCLE {
        let (code, body) = call(&s, "POST", "/predict", Some(json!({ "prefix": [name], "k": 3 }))).await;
        assert_eq!(code, StatusCode::OK, "{body}");
        let r: PredictResponse = serde_json::from_value(body).unwrap();
        assert_eq!(r.predictions.len(), 3);
        assert_eq!(r.predictions[0].name, common::next_in_cycle(name), "after {name}: {:?}", r.predictions);
        assert!(r.predictions.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(r.history_len, 1);
        assert_eq!(r.session_version, None);
    }
    let (_, body) = call(&s, "POST", "/predict", Some(json!({ "prefix": ["Wall", "Door", "Window"] }))).await;
    let r: PredictResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.predictions.len(), 4, "k above the vocabulary size returns every command");
    assert_eq!(r.predictions[0].name, "Slab");
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let s = state();
    let cases = [
        (json!({ "prefix": [] }), StatusCode::BAD_REQUEST),
        (json!({ "prefix": ["Nope"] }), StatusCode::BAD_REQUEST),
        (json!({ "prefix": ["Wall"], "k": 0 }), StatusCode::BAD_REQUEST),
        (json!({ "prefix": ["Wall"], "session_id": "x" }), StatusCode::BAD_REQUEST),
        (json!({}), StatusCode::BAD_REQUEST),
        (json!({ "session_id": "missing" }), StatusCode::NOT_FOUND),
    ];
    for (body, want) in cases {
        let (code, resp) = call(&s, "POST", "/predict", Some(body.clone())).await;
        assert_eq!(code, want, "{body} -> {resp}");
        assert!(resp["error"].is_string());
    }
    let (code, _) = call(&s, "GET", "/session/missing", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn missing_model_is_unavailable() {
    let s = state();
    let bare = AppState { predictor: None, ..s };
    let (code, body) = call(&bare, "GET", "/health", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["status"], "no_model");
    let (code, _) = call(&bare, "POST", "/predict", Some(json!({ "prefix": ["Wall"] }))).await;
    assert_eq!(code, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn session_predictions_follow_ingested_logs() {
    let s = state();
    let mut text = String::new();
    for (i, (name, loc)) in common::CYCLE.iter().take(2).enumerate() {
        text += &common::command_lines("live", common::T0 + i as i64 * 1000, name, *loc).join("\n");
        text.push('\n');
    }
    ingest_text(&s, &text);
    let (code, body) = call(&s, "GET", "/session/live", None).await;
    assert_eq!(code, StatusCode::OK);
    let view: SessionView = serde_json::from_value(body).unwrap();
    assert_eq!(view.items.iter().map(|i| i.name.as_str()).collect::<Vec<_>>(), ["Wall", "Door"]);
    let (_, body) = call(&s, "POST", "/predict", Some(json!({ "session_id": "live" }))).await;
    let r: PredictResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.predictions[0].name, "Window");
    assert_eq!(r.session_version, Some(view.version));
    assert_eq!(r.history_len, 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_predictions_match_serial_ones() {
    let s = state();
    let prefixes: Vec<Vec<String>> = (0..24)
        .map(|i| (0..1 + i % 7).map(|j| common::CYCLE[(i + j) % 4].0.to_string()).collect())
        .collect();
    let mut serial = Vec::new();
    for p in &prefixes {
        let (_, body) = call(&s, "POST", "/predict", Some(json!({ "prefix": p }))).await;
        serial.push(serde_json::from_value::<PredictResponse>(body).unwrap().predictions);
    }
    let handles: Vec<_> = prefixes
        .iter()
        .map(|p| {
            let s = s.clone();
            let p = p.clone();
            tokio::spawn(async move { call(&s, "POST", "/predict", Some(json!({ "prefix": p }))).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(serial) {
        let (_, body) = h.await.unwrap();
        assert_eq!(serde_json::from_value::<PredictResponse>(body).unwrap().predictions, want);
    }
}
