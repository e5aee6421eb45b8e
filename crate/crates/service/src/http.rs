//! HTTP endpoints and the log poller that feeds them.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmdrec_core::logs::Category;
use cmdrec_core::preprocess::CleanItem;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::error::ServiceError;
use crate::predictor::{Prediction, Predictor};
use crate::session::SessionStore;
use crate::tail::LogTailer;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PollerOptions {
    #[serde(with = "millis")]
    pub interval: Duration,
    #[serde(with = "millis")]
    pub idle_timeout: Duration,
    /// Ceiling for the retry delay after read errors.
    #[serde(with = "millis")]
    pub max_backoff: Duration,
}

mod millis {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
}

impl Default for PollerOptions {
    fn default() -> Self {
        PollerOptions {
            interval: Duration::from_millis(500),
            idle_timeout: Duration::from_secs(30 * 60),
            max_backoff: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PollStats {
    pub cycles: u64,
    pub records: u64,
    pub errors: u64,
    /// Wall time of the most recent cycle, milliseconds.
    pub last_cycle_ms: f64,
}

#[derive(Clone)]
pub struct AppState {
    pub predictor: Option<Arc<Predictor>>,
    pub sessions: Arc<Mutex<SessionStore>>,
    pub stats: Arc<Mutex<PollStats>>,
    pub options: PollerOptions,
}

impl AppState {
    pub fn new(predictor: Option<Predictor>, sessions: SessionStore, options: PollerOptions) -> Self {
        AppState {
            predictor: predictor.map(Arc::new),
            sessions: Arc::new(Mutex::new(sessions)),
            stats: Arc::default(),
            options,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub prefix: Option<Vec<String>>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predictions: Vec<Prediction>,
    pub model: String,
    /// Number of history items the prediction was computed from.
    pub history_len: usize,
    /// Buffer version for session requests.
    pub session_version: Option<u64>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub version: u64,
    pub items: Vec<CleanItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabRow {
    pub id: u32,
    pub name: String,
    pub category: Category,
    pub loc_id: i64,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/vocab", get(vocab))
        .route("/session/{id}", get(session))
        .route("/predict", post(predict))
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let sessions = s.sessions.lock().expect("session lock").len();
    let poll = s.stats.lock().expect("stats lock").clone();
    Json(json!({
        "status": if s.predictor.is_some() { "ok" } else { "no_model" },
        "model": s.predictor.as_ref().map(|p| p.tag().to_string()),
        "sessions": sessions,
        "poll_interval_ms": s.options.interval.as_millis() as u64,
        "poll": poll,
    }))
}

async fn vocab(State(s): State<AppState>) -> Result<Json<Vec<VocabRow>>, ServiceError> {
    let p = s.predictor.as_ref().ok_or(ServiceError::ModelNotLoaded)?;
    Ok(Json(
        p.vocab()
            .commands()
            .map(|(id, e)| VocabRow { id, name: e.name.clone(), category: e.category, loc_id: e.loc_id })
            .collect(),
    ))
}

async fn session(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ServiceError> {
    let store = s.sessions.lock().expect("session lock");
    let state = store.get(&id).ok_or_else(|| ServiceError::UnknownSession(id.clone()))?;
    Ok(Json(SessionView { session_id: id, version: state.version, items: state.buffer().to_vec() }))
}

async fn predict(State(s): State<AppState>, Json(req): Json<PredictRequest>) -> Result<Json<PredictResponse>, ServiceError> {
    let started = Instant::now();
    let predictor = s.predictor.clone().ok_or(ServiceError::ModelNotLoaded)?;
    let k = req.k.unwrap_or(DEFAULT_K);
    let (history, version) = match (req.session_id, req.prefix) {
        (Some(id), None) => {
            let store = s.sessions.lock().expect("session lock");
            let state = store.get(&id).ok_or(ServiceError::UnknownSession(id))?;
            (state.buffer().to_vec(), Some(state.version))
        }
        (None, Some(names)) => (predictor.resolve(&names)?, None),
        _ => return Err(ServiceError::AmbiguousRequest),
    };
    let history_len = history.len();
    let model = predictor.clone();
    let predictions = tokio::task::spawn_blocking(move || model.predict(&history, k))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    Ok(Json(PredictResponse {
        predictions,
        model: predictor.tag().to_string(),
        history_len,
        session_version: version,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

/// Polls one file forever, feeding the session store.
pub async fn run_poller(mut tailer: LogTailer, state: AppState) {
    let opts = state.options;
    let mut ticker = tokio::time::interval(opts.interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut backoff = opts.interval;
    loop {
        ticker.tick().await;
        let started = Instant::now();
        match tailer.poll() {
            Ok(records) => {
                backoff = opts.interval;
                let now = Instant::now();
                let mut store = state.sessions.lock().expect("session lock");
                store.ingest_at(&records, now);
                let evicted = store.evict_idle(now, opts.idle_timeout);
                drop(store);
                if evicted > 0 {
                    log::info!("evicted {evicted} idle sessions");
                }
                let mut stats = state.stats.lock().expect("stats lock");
                stats.cycles += 1;
                stats.records += records.len() as u64;
                stats.last_cycle_ms = started.elapsed().as_secs_f64() * 1e3;
            }
            Err(e) => {
                state.stats.lock().expect("stats lock").errors += 1;
                log::warn!("reading {}: {e}; retrying in {backoff:?}", tailer.path().display());
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(opts.max_backoff);
            }
        }
    }
}

/// A running service: the bound address plus its tasks.
pub struct Running {
    pub addr: SocketAddr,
    pub server: JoinHandle<std::io::Result<()>>,
    pub pollers: Vec<JoinHandle<()>>,
}

impl Running {
    pub fn abort(&self) {
        self.server.abort();
        self.pollers.iter().for_each(JoinHandle::abort);
    }
}

/// Binds `addr` (port 0 picks a free one), then serves and polls `watch` in the background.
pub async fn start(addr: SocketAddr, state: AppState, watch: Vec<PathBuf>) -> std::io::Result<Running> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let pollers = watch.into_iter().map(|p| tokio::spawn(run_poller(LogTailer::new(p), state.clone()))).collect();
    let app = router(state);
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    log::info!("listening on http://{addr}");
    Ok(Running { addr, server, pollers })
}
