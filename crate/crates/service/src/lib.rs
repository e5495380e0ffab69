//! HTTP service running BOPE sessions for a live decision-maker.
//!
//! Mutations of one session are serialized by a per-session lock and run
//! against a copy of the session; the events they produce are appended to
//! the session's log and synced before the copy replaces the published
//! snapshot and the response is sent. Reads use the published snapshot.

pub mod api;
pub mod config;
pub mod status;
pub mod store;

use crate::api::*;
use crate::config::ServiceConfig;
use crate::status::{check, derive, Denial, Status, Verb};
use crate::store::{SessionMeta, Store};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bope_core::config::{Budgets, LoopConfig};
use bope_core::pref::Response as Choice;
use bope_core::problems::Benchmark;
use bope_core::runner::{BenchmarkEvaluator, Evaluator};
use bope_core::session::{events_to_jsonl, metrics_to_csv, Session, SCHEMA_VERSION};
use bope_core::BopeError;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn validation(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, kind: "validation", message: msg.into() }
    }

    fn conflict(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::CONFLICT, kind: "conflict", message: msg.into() }
    }

    fn not_found(id: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, kind: "not-found", message: format!("no session '{id}'") }
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, kind: "runtime", message: msg.into() }
    }

    fn is_runtime(&self) -> bool {
        self.status == StatusCode::INTERNAL_SERVER_ERROR
    }
}

impl From<BopeError> for ApiError {
    fn from(e: BopeError) -> Self {
        match e {
            BopeError::Validation(m) => Self::validation(m),
            BopeError::Json(e) => Self::validation(e.to_string()),
            BopeError::Conflict(m) => Self::conflict(m),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: ErrorDetail { kind: self.kind.into(), message: self.message },
        };
        (self.status, axum::Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Immutable published state of one session.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub meta: SessionMeta,
    pub session: Arc<Session>,
    /// An acquisition is being computed.
    pub busy: bool,
}

impl Snapshot {
    pub fn status(&self) -> Status {
        if self.busy {
            Status::RunningAcquisition
        } else {
            derive(&self.session, self.meta.failure.is_some())
        }
    }

    pub fn view(&self) -> SessionView {
        let s = &self.session;
        SessionView {
            schema_version: SCHEMA_VERSION,
            id: self.meta.id.clone(),
            status: self.status(),
            config: self.meta.config.clone(),
            created_ms: self.meta.created_ms,
            updated_ms: self.meta.updated_ms,
            failure: self.meta.failure.clone(),
            pending_query: s.pending_query().map(|q| query_view(s, q)),
            pending_batch: s.pending_batch().map(|b| batch_view(s, b)),
            event_count: s.events().len(),
            summary: s.summary(),
        }
    }
}

struct Slot {
    lock: tokio::sync::Mutex<()>,
    snap: RwLock<Arc<Snapshot>>,
}

impl Slot {
    fn get(&self) -> Arc<Snapshot> {
        self.snap.read().expect("snapshot lock").clone()
    }

    fn set(&self, s: Snapshot) {
        *self.snap.write().expect("snapshot lock") = Arc::new(s);
    }
}

pub struct AppState {
    store: Store,
    defaults: Budgets,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// Opens the store and rebuilds every stored session by replaying its log.
    pub fn recover(store: Store, defaults: Budgets) -> std::io::Result<Self> {
        let mut sessions = HashMap::new();
        for (meta, events) in store.load_all()? {
            match Session::replay(meta.config.clone(), 0, events) {
                Ok(session) => {
                    let snap = Snapshot { meta, session: Arc::new(session), busy: false };
                    sessions.insert(
                        snap.meta.id.clone(),
                        Arc::new(Slot { lock: tokio::sync::Mutex::new(()), snap: RwLock::new(Arc::new(snap)) }),
                    );
                }
                Err(e) => log::error!("cannot replay session {}: {e}", meta.id),
            }
        }
        Ok(Self { store, defaults, sessions: RwLock::new(sessions) })
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("sessions lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn snapshot(&self, id: &str) -> Option<Arc<Snapshot>> {
        self.slot(id).map(|s| s.get())
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions.read().expect("sessions lock").get(id).cloned()
    }

    /// Runs `op` on a copy of the session, persists the new events and publishes the result.
    async fn mutate<R, F>(self: &Arc<Self>, id: &str, verb: Verb, op: F) -> ApiResult<(R, Arc<Snapshot>)>
    where
        R: Send + 'static,
        F: FnOnce(&mut Session) -> Result<R, BopeError> + Send + 'static,
    {
        let slot = self.slot(id).ok_or_else(|| ApiError::not_found(id))?;
        let _guard = slot.lock.lock().await;
        let snap = slot.get();
        check(Some(snap.status()), verb).map_err(|d| match d {
            Denial::NotFound => ApiError::not_found(id),
            Denial::Conflict => {
                ApiError::conflict(format!("cannot {verb:?} while the session is {}", snap.status().as_str()))
            }
        })?;
        let computes = matches!(verb, Verb::NextQuery | Verb::ProposeBatch);
        if computes {
            slot.set(Snapshot { busy: true, ..(*snap).clone() });
        }
        let work = (*snap.session).clone();
        let before = work.events().len();
        let joined = tokio::task::spawn_blocking(move || {
            let mut w = work;
            let r = op(&mut w);
            (w, r)
        })
        .await;
        let (work, result) = match joined {
            Ok(x) => x,
            Err(e) => {
                slot.set((*snap).clone());
                return Err(ApiError::internal(format!("worker panicked: {e}")));
            }
        };
        match result {
            Ok(r) => {
                let mut meta = snap.meta.clone();
                meta.updated_ms = now_ms();
                let store = self.store.clone();
                let id_owned = id.to_string();
                let work = Arc::new(work);
                let w2 = work.clone();
                let meta2 = meta.clone();
                let persisted = tokio::task::spawn_blocking(move || -> std::io::Result<()> {
                    store.append(&id_owned, &w2.events()[before..])?;
                    store.write_meta(&meta2)?;
                    if matches!(verb, Verb::CompleteBatch | Verb::ProposeBatch) {
                        store.write_snapshot(&id_owned, &w2.summary())?;
                    }
                    Ok(())
                })
                .await;
                if let Err(e) = persisted.map_err(|e| e.to_string()).and_then(|r| r.map_err(|e| e.to_string())) {
                    slot.set((*snap).clone());
                    return Err(ApiError::internal(format!("cannot persist events: {e}")));
                }
                let published = Snapshot { meta, session: work, busy: false };
                slot.set(published.clone());
                Ok((r, Arc::new(published)))
            }
            Err(e) => {
                let err = ApiError::from(e);
                if err.is_runtime() {
                    let mut meta = snap.meta.clone();
                    meta.failure = Some(err.message.clone());
                    meta.updated_ms = now_ms();
                    if let Err(io) = self.store.write_meta(&meta) {
                        log::error!("cannot record failure of session {id}: {io}");
                    }
                    slot.set(Snapshot { meta, busy: false, ..(*snap).clone() });
                } else {
                    slot.set((*snap).clone());
                }
                Err(err)
            }
        }
    }

    async fn create(self: &Arc<Self>, req: CreateSessionRequest) -> ApiResult<Arc<Snapshot>> {
        check_version(req.schema_version).map_err(ApiError::validation)?;
        let mut value = req.config;
        let obj = value.as_object_mut().ok_or_else(|| ApiError::validation("config must be a JSON object"))?;
        if !obj.contains_key("budgets") {
            obj.insert("budgets".into(), serde_json::to_value(&self.defaults).expect("budgets serialize"));
        }
        let config: LoopConfig = serde_json::from_value(value).map_err(|e| ApiError::validation(format!("config: {e}")))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let now = now_ms();
        let meta = SessionMeta {
            schema_version: SCHEMA_VERSION,
            id: id.clone(),
            config: config.clone(),
            created_ms: now,
            updated_ms: now,
            failure: None,
        };
        let initial = req.initial_data;
        let imported = req.events;
        let session = tokio::task::spawn_blocking(move || -> Result<Session, BopeError> {
            if let Some(events) = imported {
                return Session::replay(config, 0, events);
            }
            let mut s = Session::new(config, 0)?;
            if let Some(data) = initial {
                s.start(Some(data.designs))?;
                s.complete_batch(data.outcomes)?;
            } else {
                let designs = s.start(None)?.designs.clone();
                if let Some(b) = s.benchmark().cloned() {
                    let outcomes = evaluate(&b, &designs)?;
                    s.complete_batch(outcomes)?;
                }
            }
            Ok(s)
        })
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))??;
        let store = self.store.clone();
        let session = Arc::new(session);
        let (m2, s2) = (meta.clone(), session.clone());
        tokio::task::spawn_blocking(move || -> std::io::Result<()> {
            store.create(&m2)?;
            store.append(&m2.id, s2.events())?;
            store.write_snapshot(&m2.id, &s2.summary())
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(format!("cannot persist session: {e}")))?;
        let snap = Snapshot { meta, session, busy: false };
        let slot = Arc::new(Slot { lock: tokio::sync::Mutex::new(()), snap: RwLock::new(Arc::new(snap.clone())) });
        self.sessions.write().expect("sessions lock").insert(id, slot);
        Ok(Arc::new(snap))
    }
}

fn evaluate(b: &Benchmark, designs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, BopeError> {
    let mut eval = BenchmarkEvaluator::new(b.clone());
    designs.iter().map(|x| eval.evaluate(x)).collect()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.is_empty() { "{}".as_bytes() } else { body.as_ref() };
    serde_json::from_slice(text).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn json<T: serde::Serialize>(code: StatusCode, body: &T) -> Response {
    (code, axum::Json(body)).into_response()
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSessionRequest = parse(&body)?;
    let snap = state.create(req).await?;
    Ok(json(StatusCode::CREATED, &snap.view()))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Response {
    json(StatusCode::OK, &serde_json::json!({ "schema_version": SCHEMA_VERSION, "sessions": state.session_ids() }))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = state.snapshot(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(json(StatusCode::OK, &snap.view()))
}

async fn next_query(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: VersionOnly = parse(&body)?;
    check_version(req.schema_version).map_err(ApiError::validation)?;
    let ((), snap) = state.mutate(&id, Verb::NextQuery, |s| s.next_query().map(|_| ())).await?;
    let q = snap.session.pending_query().expect("query pending");
    let body = QueryResponse { schema_version: SCHEMA_VERSION, status: snap.status(), query: query_view(&snap.session, q) };
    Ok(json(StatusCode::OK, &body))
}

async fn submit_response(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: RespondRequest = parse(&body)?;
    check_version(req.schema_version).map_err(ApiError::validation)?;
    let choice = Choice::try_from(req.choice).map_err(|_| ApiError::validation("choice must be 1 or 2"))?;
    if let (Some(qid), Some(snap)) = (req.query_id, state.snapshot(&id)) {
        if let Some(p) = snap.session.pending_query() {
            if p.seq != qid {
                return Err(ApiError::conflict(format!("pending query is {}, not {qid}", p.seq)));
            }
        }
    }
    let ((), snap) = state.mutate(&id, Verb::Respond, move |s| s.submit_response(req.query_id, choice)).await?;
    let body =
        RespondResponse { schema_version: SCHEMA_VERSION, accepted: true, status: snap.status(), summary: snap.session.summary() };
    Ok(json(StatusCode::OK, &body))
}

async fn propose_batch(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: ProposeRequest = parse(&body)?;
    check_version(req.schema_version).map_err(ApiError::validation)?;
    if req.q == Some(0) {
        return Err(ApiError::validation("q must be at least 1"));
    }
    let (batch, snap) = state
        .mutate(&id, Verb::ProposeBatch, move |s| {
            let batch = s.propose_batch(req.q)?.clone();
            let outcomes = match s.benchmark().cloned() {
                Some(b) => {
                    let outcomes = evaluate(&b, &batch.designs)?;
                    s.complete_batch(outcomes.clone())?;
                    Some(outcomes)
                }
                None => None,
            };
            Ok((batch, outcomes))
        })
        .await?;
    let (batch, outcomes) = batch;
    let body = BatchResponse {
        schema_version: SCHEMA_VERSION,
        status: snap.status(),
        batch: batch_view(&snap.session, &batch),
        outcomes,
        summary: snap.session.summary(),
    };
    Ok(json(StatusCode::OK, &body))
}

async fn complete_batch(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: CompleteRequest = parse(&body)?;
    check_version(req.schema_version).map_err(ApiError::validation)?;
    let snap = state.snapshot(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match (snap.session.pending_batch(), req.batch_id) {
        (None, _) => {}
        (Some(b), Some(bid)) if b.seq != bid => {
            return Err(ApiError::conflict(format!("pending batch is {}, not {bid}", b.seq)));
        }
        (Some(b), _) if b.designs.len() != req.outcomes.len() => {
            return Err(ApiError::validation(format!(
                "expected {} outcome rows, got {}",
                b.designs.len(),
                req.outcomes.len()
            )));
        }
        _ => {}
    }
    let ((), snap) = state.mutate(&id, Verb::CompleteBatch, move |s| s.complete_batch(req.outcomes)).await?;
    let body = CompleteResponse { schema_version: SCHEMA_VERSION, status: snap.status(), summary: snap.session.summary() };
    Ok(json(StatusCode::OK, &body))
}

#[derive(Deserialize)]
struct ExportParams {
    format: Option<String>,
}

async fn export(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(p): Query<ExportParams>,
) -> ApiResult<Response> {
    let snap = state.snapshot(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match p.format.as_deref().unwrap_or("jsonl") {
        "jsonl" => {
            let text = events_to_jsonl(snap.session.events())?;
            Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
        }
        "csv" => {
            let text = metrics_to_csv(snap.session.metrics())?;
            Ok(([(header::CONTENT_TYPE, "text/csv")], text).into_response())
        }
        other => Err(ApiError::validation(format!("unknown export format '{other}'; valid: jsonl, csv"))),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/queries", post(next_query))
        .route("/sessions/{id}/responses", post(submit_response))
        .route("/sessions/{id}/batches", post(propose_batch).put(complete_batch))
        .route("/sessions/{id}/export", get(export))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("storage: {0}")]
    Storage(#[from] std::io::Error),
}

/// Recovers stored sessions and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let store = Store::open(&config.storage_dir)?;
    let state = Arc::new(AppState::recover(store, config.budgets.clone())?);
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {addr}, {} stored sessions", state.session_ids().len());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
