//! HTTP service for blinded human evaluation.
//!
//! A rater chats with a trained model through three scenes (home, reception,
//! professional's room) and then rates the conversation. Each session is
//! assigned a migration mode at creation. The mode stays out of every
//! response until the ratings are in.
//!
//! Routes:
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | `{model_id, seed?}` | `{session_id, scene}` |
//! | GET | `/sessions/{id}` | | session view |
//! | POST | `/sessions/{id}/message` | `{text}` | `{reply, scene}` |
//! | POST | `/sessions/{id}/advance` | | `{status, scene?}` |
//! | POST | `/sessions/{id}/ratings` | `{fluency, engagingness, consistency}` | `{session_id, condition}` |
//! | GET | `/sessions/{id}/audit` | | conditioning tokens (debug only) |
//! | GET | `/reports/human-eval` | | `{cells, table}` |
//! | GET | `/health` | | `{status, models}` |
//!
//! Errors come back as `{error, detail}`.

mod labeler;
pub mod session;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use migdial_core::corpus::{MigrationMode, Setting, Speaker, Utterance};
use migdial_core::dataset::input_for;
use migdial_core::eval::{aggregate_ratings, render_human_eval, RaterRole, RatingRecord, SdKind};
use migdial_core::models::{TracedToken, TrainedModel, DEFAULT_MAX_LEN};

pub use labeler::PrivacyLabeler;
pub use session::{Event, SceneView, Session, SessionView, Status, DEFAULT_MIN_TURNS, SCENARIO};
pub use store::{Replay, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    State(String),
    #[error("{detail}")]
    Precondition { detail: String, remaining_turns: usize },
    #[error("corrupt session log: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::State(_) | ServiceError::Precondition { .. } => StatusCode::CONFLICT,
            ServiceError::Corrupt(_) | ServiceError::Internal(_) | ServiceError::Io(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Validation(_) => "validation",
            ServiceError::State(_) => "state",
            ServiceError::Precondition { .. } => "precondition",
            ServiceError::Corrupt(_) => "corrupt_store",
            ServiceError::Internal(_) | ServiceError::Io(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind(), "detail": self.to_string() });
        if let ServiceError::Precondition { remaining_turns, .. } = &self {
            body["remaining_turns"] = json!(remaining_turns);
        }
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Utterances required in a scene before advancing.
    pub min_turns: usize,
    /// Enables the audit route.
    pub debug: bool,
    pub max_reply_len: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { min_turns: DEFAULT_MIN_TURNS, debug: false, max_reply_len: DEFAULT_MAX_LEN }
    }
}

/// Shared service state. Sessions are locked one at a time; a session's
/// lock is held across inference and logging so its events stay ordered.
pub struct App {
    models: BTreeMap<String, Arc<TrainedModel>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    store: Mutex<SessionStore>,
    labeler: PrivacyLabeler,
    config: ServiceConfig,
}

fn lock<T>(m: &Mutex<T>) -> Result<MutexGuard<'_, T>, ServiceError> {
    m.lock().map_err(|_| ServiceError::Internal("lock poisoned".into()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Mode for a new session: a fair coin, seeded when a seed is given.
pub fn assign_mode(seed: Option<u64>) -> MigrationMode {
    let with = match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s).gen_bool(0.5),
        None => rand::random(),
    };
    if with {
        MigrationMode::WithContext
    } else {
        MigrationMode::WithoutContext
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    model_id: String,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRequest {
    text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingRequest {
    fluency: i64,
    engagingness: i64,
    consistency: i64,
}

#[derive(Debug, Serialize)]
struct AuditEntry {
    scene: usize,
    setting: Setting,
    utterance: usize,
    reply: String,
    tokens: Vec<TracedToken>,
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("malformed request body: {e}")))
}

impl App {
    pub fn new(
        models: BTreeMap<String, TrainedModel>,
        store: SessionStore,
        replay: Replay,
        labeler: PrivacyLabeler,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        for s in replay.sessions.values() {
            if !models.contains_key(&s.model_id) {
                return Err(ServiceError::Corrupt(format!(
                    "session {} uses model {:?}, which is not loaded",
                    s.id, s.model_id
                )));
            }
        }
        Ok(Self {
            models: models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            sessions: Mutex::new(
                replay.sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect(),
            ),
            store: Mutex::new(store),
            labeler,
            config,
        })
    }

    /// Opens the log at `store_path` (or keeps everything in memory) and
    /// restores the sessions it holds.
    pub fn open(
        models: BTreeMap<String, TrainedModel>,
        store_path: Option<&Path>,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        let (store, replay) = match store_path {
            Some(p) => SessionStore::open(p)?,
            None => (SessionStore::in_memory(), Replay::default()),
        };
        Self::new(models, store, replay, PrivacyLabeler::health_center()?, config)
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        lock(&self.sessions)?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no session {id:?}")))
    }

    fn model(&self, id: &str) -> Result<&Arc<TrainedModel>, ServiceError> {
        self.models.get(id).ok_or_else(|| ServiceError::NotFound(format!("unknown model id {id:?}")))
    }

    /// Applies `event` to a copy, logs it, then commits the copy.
    fn commit(&self, s: &mut Session, event: Event) -> Result<(), ServiceError> {
        let mut next = s.clone();
        next.apply(&event)?;
        lock(&self.store)?.append(event)?;
        *s = next;
        Ok(())
    }

    /// A snapshot of every session, including hidden fields.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Session>, ServiceError> {
        let sessions = lock(&self.sessions)?;
        let mut out = BTreeMap::new();
        for (k, v) in sessions.iter() {
            out.insert(k.clone(), lock(v)?.clone());
        }
        Ok(out)
    }

    pub fn ratings(&self) -> Result<Vec<RatingRecord>, ServiceError> {
        Ok(lock(&self.store)?
            .events()
            .iter()
            .filter_map(|e| match e {
                Event::Rated { record } => Some(record.clone()),
                _ => None,
            })
            .collect())
    }

    pub fn sync(&self) -> Result<(), ServiceError> {
        lock(&self.store)?.sync()
    }

    /// Returns the new session's id and first scene.
    pub fn create_session(&self, model_id: &str, seed: Option<u64>) -> Result<(String, SceneView), ServiceError> {
        self.model(model_id)?;
        let mut sessions = lock(&self.sessions)?;
        let id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        let event = Event::Created {
            session_id: id.clone(),
            model_id: model_id.to_string(),
            mode: assign_mode(seed),
            seed,
            created_at: now(),
        };
        let session = Session::create(&event)?;
        lock(&self.store)?.append(event)?;
        let view = SceneView::of(&session);
        sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, view))
    }

    /// Logs the user's message with the model's reply.
    pub fn post_message(&self, id: &str, text: &str) -> Result<(String, SceneView), ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::Validation("message text is empty".into()));
        }
        let handle = self.session(id)?;
        let mut s = lock(&handle)?;
        s.require(Status::Active)?;
        let model = self.model(&s.model_id)?.clone();
        let label = self.labeler.label(text);
        let mut dialog = s.dialog();
        let user = Utterance::new(Speaker::User, text, Some(label), None)
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        dialog.scenes[s.scene].utterances.push(user);
        let ui = dialog.scenes[s.scene].utterances.len();
        let input = input_for(&dialog, s.scene, ui, &model.example_config());
        let reply = model
            .generate(&input, self.config.max_reply_len)
            .map_err(|e| ServiceError::Internal(format!("generation failed: {e}")))?
            .join(" ");
        let event = Event::Message {
            session_id: id.to_string(),
            text: text.to_string(),
            label: Some(label),
            reply_label: Some(self.labeler.label(&reply)),
            reply: reply.clone(),
        };
        self.commit(&mut s, event)?;
        Ok((reply, SceneView::of(&s)))
    }

    pub fn advance(&self, id: &str) -> Result<Value, ServiceError> {
        let handle = self.session(id)?;
        let mut s = lock(&handle)?;
        s.check_advance(self.config.min_turns)?;
        self.commit(&mut s, Event::Advanced { session_id: id.to_string() })?;
        Ok(match s.status {
            Status::Active => json!({ "status": s.status, "scene": SceneView::of(&s) }),
            _ => json!({ "status": s.status }),
        })
    }

    /// Records the ratings and reveals the session's condition.
    pub fn submit_ratings(
        &self,
        id: &str,
        fluency: i64,
        engagingness: i64,
        consistency: i64,
    ) -> Result<MigrationMode, ServiceError> {
        let mut scores = [0u8; 3];
        for (slot, (name, v)) in
            scores.iter_mut().zip([("fluency", fluency), ("engagingness", engagingness), ("consistency", consistency)])
        {
            if !(1..=5).contains(&v) {
                return Err(ServiceError::Validation(format!("{name} must be between 1 and 5, got {v}")));
            }
            *slot = v as u8;
        }
        let handle = self.session(id)?;
        let mut s = lock(&handle)?;
        s.require(Status::AwaitingRating)?;
        let record = RatingRecord {
            session_id: id.to_string(),
            model_id: s.model_id.clone(),
            condition: s.mode,
            role: RaterRole::HumanVsModel,
            fluency: scores[0],
            engagingness: scores[1],
            consistency: scores[2],
        };
        self.commit(&mut s, Event::Rated { record })?;
        Ok(s.mode)
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ServiceError> {
        let handle = self.session(id)?;
        let s = lock(&handle)?;
        Ok(SessionView::of(&s))
    }

    /// The tokens each model reply was conditioned on.
    pub fn audit(&self, id: &str) -> Result<Value, ServiceError> {
        if !self.config.debug {
            return Err(ServiceError::NotFound("audit is only available in debug mode".into()));
        }
        let handle = self.session(id)?;
        let s = lock(&handle)?.clone();
        let model = self.model(&s.model_id)?;
        let dialog = s.dialog();
        let cfg = model.example_config();
        let mut replies = Vec::new();
        for (si, scene) in dialog.scenes.iter().enumerate() {
            for (ui, u) in scene.utterances.iter().enumerate() {
                if u.speaker == Speaker::Agent {
                    replies.push(AuditEntry {
                        scene: si,
                        setting: scene.setting,
                        utterance: ui,
                        reply: u.text.clone(),
                        tokens: model.conditioning_trace(&input_for(&dialog, si, ui, &cfg)),
                    });
                }
            }
        }
        Ok(json!({ "session_id": s.id, "replies": replies }))
    }

    pub fn human_eval_report(&self) -> Result<Value, ServiceError> {
        let cells = aggregate_ratings(&self.ratings()?, SdKind::Population);
        Ok(json!({ "cells": cells, "table": render_human_eval(&cells) }))
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create(State(app): State<Arc<App>>, body: Bytes) -> Result<(StatusCode, Json<Value>), ServiceError> {
    let req: CreateRequest = parse(&body)?;
    let (id, scene) = app.create_session(&req.model_id, req.seed)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "scene": scene }))))
}

async fn message(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let req: MessageRequest = parse(&body)?;
    let (reply, scene) = blocking(move || app.post_message(&id, &req.text)).await?;
    Ok(Json(json!({ "reply": reply, "scene": scene })))
}

async fn advance(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    Ok(Json(app.advance(&id)?))
}

async fn ratings(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let r: RatingRequest = parse(&body)?;
    let condition = app.submit_ratings(&id, r.fluency, r.engagingness, r.consistency)?;
    Ok(Json(json!({ "session_id": id, "condition": condition })))
}

async fn view(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    Ok(Json(serde_json::to_value(app.view(&id)?).map_err(|e| ServiceError::Internal(e.to_string()))?))
}

async fn audit(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    Ok(Json(blocking(move || app.audit(&id)).await?))
}

async fn report(State(app): State<Arc<App>>) -> ApiResult {
    Ok(Json(app.human_eval_report()?))
}

async fn health(State(app): State<Arc<App>>) -> ApiResult {
    Ok(Json(json!({ "status": "ok", "models": app.model_ids() })))
}

async fn no_route() -> ServiceError {
    ServiceError::NotFound("no such route".into())
}

async fn no_method() -> Response {
    let mut r = ServiceError::BadRequest("method not allowed on this route".into()).into_response();
    *r.status_mut() = StatusCode::METHOD_NOT_ALLOWED;
    r
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(view))
        .route("/sessions/{id}/message", post(message))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/ratings", post(ratings))
        .route("/sessions/{id}/audit", get(audit))
        .route("/reports/human-eval", get(report))
        .fallback(no_route)
        .method_not_allowed_fallback(no_method)
        .with_state(app)
}

/// Serves until `shutdown` resolves, then flushes the log to disk.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Arc<App>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(app.clone())).with_graceful_shutdown(shutdown).await?;
    app.sync()
}
