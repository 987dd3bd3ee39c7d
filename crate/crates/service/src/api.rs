//! REST API for live sessions, answered by a person through the human relay.
//!
//! Every session operation runs on the blocking pool under the session's own
//! lock, so one session is a single-writer state machine while different
//! sessions proceed concurrently.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iviq_core::answer::{AnswerError, AnswerProvider, AnswerResult, HumanAnswerer, HumanRelay, ProviderTag, RelayError};
use iviq_core::session::{Proposal, SessionError};
use iviq_core::{CorpusManifest, Session, SessionConfig, SessionContext};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

/// How long `/next` waits for the answer worker to publish its question.
const POST_TIMEOUT: Duration = Duration::from_secs(5);

/// A loaded gallery: the session context plus media locations for display.
pub struct Corpus {
    pub ctx: SessionContext,
    media: HashMap<String, String>,
}

impl Corpus {
    #[must_use]
    pub fn new(manifest: &CorpusManifest, ctx: SessionContext) -> Self {
        let media = manifest
            .videos
            .iter()
            .map(|v| (v.video_id.clone(), v.media_uri.clone()))
            .collect();
        Self { ctx, media }
    }
}

struct PendingRound {
    proposal: Proposal,
    result: Receiver<Result<AnswerResult, AnswerError>>,
}

struct LiveSession {
    session: Session,
    pending: Option<PendingRound>,
}

pub struct AppState {
    corpus: OnceLock<Arc<Corpus>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<LiveSession>>>>,
    relay: Arc<HumanRelay>,
    defaults: SessionConfig,
}

impl AppState {
    /// A service with no corpus yet; health reports `loading` until
    /// [`AppState::install`] is called.
    #[must_use]
    pub fn new(mut defaults: SessionConfig) -> Arc<Self> {
        defaults.answerer = ProviderTag::Human;
        Arc::new(Self {
            corpus: OnceLock::new(),
            sessions: Mutex::new(HashMap::new()),
            relay: Arc::new(HumanRelay::new()),
            defaults,
        })
    }

    /// Make the corpus available. Later calls are ignored.
    pub fn install(&self, corpus: Corpus) {
        let _ = self.corpus.set(Arc::new(corpus));
    }

    #[must_use]
    pub fn is_ready(&self) -> bool {
        self.corpus.get().is_some()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ApiError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
    }

    fn corpus(&self) -> Result<Arc<Corpus>, ApiError> {
        self.corpus
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "the index is still loading"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::EmptyQuery
            | SessionError::InvalidConfig(_)
            | SessionError::Capability(_)
            | SessionError::UnknownTarget(_) => StatusCode::BAD_REQUEST,
            SessionError::EmptyAnswer => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::StaleProposal { .. } => StatusCode::CONFLICT,
            SessionError::Embed(_) | SessionError::Question(_) | SessionError::Answer(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub video_id: String,
    pub score: f64,
    pub media_uri: String,
}

fn top_slice(corpus: &Corpus, session: &Session) -> Vec<TopEntry> {
    let n = session.config().top_n;
    session
        .ranking()
        .entries
        .iter()
        .take(n)
        .map(|e| TopEntry {
            video_id: e.video_id.clone(),
            score: e.itm_score.unwrap_or(e.cosine_score),
            media_uri: corpus.media.get(&e.video_id).cloned().unwrap_or_default(),
        })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub query: String,
    /// Partial [`SessionConfig`]; keys not given keep the service defaults.
    #[serde(default)]
    pub config: Option<Value>,
    /// Attach a known target so responses report its rank movement.
    #[serde(default)]
    pub target_video_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub round: usize,
    pub top: Vec<TopEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    pub question: String,
    pub round: usize,
}

#[derive(Debug, Deserialize)]
pub struct AnswerBody {
    pub answer: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub round: usize,
    pub top: Vec<TopEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_delta: Option<i64>,
}

/// Overlay `overrides` on `defaults`. Objects merge key by key; anything else
/// replaces the default.
fn merge(defaults: &mut Value, overrides: Value) {
    match (defaults, overrides) {
        (Value::Object(base), Value::Object(over)) => {
            for (k, v) in over {
                match base.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply client overrides to the service defaults. API sessions are always
/// answered by a person.
pub fn session_config(defaults: &SessionConfig, overrides: Option<Value>) -> Result<SessionConfig, String> {
    let mut value = serde_json::to_value(defaults).expect("config serializes");
    if let Some(over) = overrides {
        if !over.is_object() {
            return Err("config must be a JSON object".into());
        }
        merge(&mut value, over);
    }
    let config: SessionConfig = serde_json::from_value(value).map_err(|e| format!("invalid config: {e}"))?;
    if config.answerer != ProviderTag::Human {
        return Err(format!(
            "API sessions are answered through /answer; answerer {} is not available here",
            config.answerer
        ));
    }
    Ok(config)
}

fn session_id() -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let status = if state.is_ready() { "ok" } else { "loading" };
    Json(json!({ "status": status }))
}

async fn create(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let corpus = state.corpus()?;
    let request = body(payload)?;
    let config = session_config(&state.defaults, request.config)
        .map_err(|m| ApiError::new(StatusCode::BAD_REQUEST, m))?;
    let response = blocking(move || {
        let mut session = Session::start(
            &corpus.ctx,
            &request.query,
            config,
            request.target_video_id.as_deref(),
        )?;
        let id = session_id();
        session.set_session_id(id.clone());
        let top = top_slice(&corpus, &session);
        state.relay.attach(&id);
        state.sessions.lock().expect("session map lock").insert(
            id.clone(),
            Arc::new(Mutex::new(LiveSession {
                session,
                pending: None,
            })),
        );
        Ok(CreateResponse {
            session_id: id,
            round: 0,
            top,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(response)))
}

async fn next(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<NextResponse>, ApiError> {
    let corpus = state.corpus()?;
    let live = state.session(&id)?;
    let response = blocking(move || {
        let mut live = live.lock().expect("session lock");
        if let Some(pending) = &live.pending {
            // A finished worker means the question expired or was detached.
            match pending.result.try_recv() {
                Err(TryRecvError::Empty) => {
                    return Err(ApiError::new(
                        StatusCode::CONFLICT,
                        "a question is already pending; answer it first",
                    ))
                }
                Ok(_) | Err(TryRecvError::Disconnected) => live.pending = None,
            }
        }
        let Some(proposal) = live.session.propose(&corpus.ctx)? else {
            return Err(ApiError::new(StatusCode::GONE, "the session has no questions left"));
        };
        let request = live.session.answer_request(&proposal);
        let answerer = HumanAnswerer::new(state.relay.clone());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let _ = tx.send(answerer.answer(&request));
        });
        if state.relay.wait_for_question(&id, POST_TIMEOUT).is_none() {
            // Leave the worker a receiver so it can still report and exit.
            live.pending = Some(PendingRound { proposal, result: rx });
            return Err(ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "the question could not be published",
            ));
        }
        let response = NextResponse {
            question: proposal.question.text.clone(),
            round: proposal.round_index,
        };
        live.pending = Some(PendingRound { proposal, result: rx });
        Ok(response)
    })
    .await?;
    Ok(Json(response))
}

async fn answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    payload: Result<Json<AnswerBody>, JsonRejection>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let corpus = state.corpus()?;
    let live = state.session(&id)?;
    let text = body(payload)?.answer;
    let response = blocking(move || {
        let mut live = live.lock().expect("session lock");
        if live.pending.is_none() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no question is pending"));
        }
        if text.trim().is_empty() {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "answer must not be empty"));
        }
        match state.relay.submit(&id, &text) {
            Ok(()) => {}
            Err(RelayError::EmptyAnswer) => {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "answer must not be empty"))
            }
            Err(e) => {
                live.pending = None;
                return Err(ApiError::new(StatusCode::CONFLICT, format!("question expired: {e}")));
            }
        }
        let pending = live.pending.take().expect("checked above");
        let result = pending
            .result
            .recv()
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "answer worker vanished"))?
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, format!("question expired: {e}")))?;
        let before = live.session.record().trajectory.last().and_then(|s| s.target_rank);
        let snap = live.session.commit(&corpus.ctx, &pending.proposal, &result)?;
        let rank_delta = before
            .zip(snap.target_rank)
            .map(|(b, a)| b as i64 - a as i64);
        Ok(AnswerResponse {
            round: snap.round,
            top: top_slice(&corpus, &live.session),
            rank_delta,
        })
    })
    .await?;
    Ok(Json(response))
}

async fn record(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let live = state.session(&id)?;
    let json = blocking(move || Ok(live.lock().expect("session lock").session.record().to_json())).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], json).into_response())
}

/// The `/api` routes, plus the UI bundle from `static_dir` for every other
/// path.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/healthz", get(healthz))
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}", get(record))
        .route("/api/sessions/{id}/next", post(next))
        .route("/api/sessions/{id}/answer", post(answer))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
