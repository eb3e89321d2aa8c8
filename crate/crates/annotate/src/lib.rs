//! HTTP service for human annotation sessions.
//!
//! Endpoints (all bodies are JSON):
//!
//! ```text
//! GET  /api/status      round, answered, pending, total_budget, precision_so_far, status
//! GET  /api/queue       unanswered nodes of the pending batch
//! GET  /api/node/{id}   one pending node with its two-hop answer histogram
//! POST /api/label       {"node_id": 3, "answer": 1 | "UNKNOWN"}; needs X-Session-Token
//! GET  /api/classes     ID class names in index order, then "UNKNOWN"
//! ```
//!
//! `POST /api/label` answers 200 on accept, 409 when the node was already
//! answered or is not pending, 422 when the answer is out of range or the
//! body is malformed, and 401 without the session token. Answers are
//! appended to the session log and synced before the reply. When a batch
//! is complete the loop advances in the background; status reads
//! `advancing` until the next batch is ready.

pub mod view;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gosl_core::active::AnswerRejection;
use gosl_core::oracle::{Answer, UNKNOWN_SENTINEL};
use gosl_core::report::RunSummary;
use gosl_core::session::Session;
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Mutex};

pub use view::{FeatureValue, NeighborSummary, NodeDetail, PendingItem, Phase, Status, View};

pub const TOKEN_HEADER: &str = "x-session-token";
const DEFAULT_ANNOTATOR: &str = "annotator";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Session(#[from] gosl_core::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Server(#[from] std::io::Error),
}

/// Body of `POST /api/label`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub node_id: usize,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

struct Shared {
    session: Mutex<Session>,
    view: watch::Sender<Arc<View>>,
    classes: Vec<String>,
    token: String,
}

/// Shared state of the service: the session behind a single writer lock,
/// and the latest published [`View`].
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

fn error(code: StatusCode, message: impl Into<String>) -> Response {
    (code, Json(ErrorBody { error: message.into() })).into_response()
}

impl AppState {
    /// Wraps an open session. A batch completed before a restart is
    /// advanced here, before any request is served.
    pub fn new(mut session: Session, token: impl Into<String>) -> Result<Self, ServeError> {
        session.advance_if_complete()?;
        session.write_report()?;
        let mut classes = session.class_names().to_vec();
        classes.push(UNKNOWN_SENTINEL.to_string());
        let view = Arc::new(view::build(&session, None, None));
        Ok(Self {
            shared: Arc::new(Shared {
                session: Mutex::new(session),
                view: watch::channel(view).0,
                classes,
                token: token.into(),
            }),
        })
    }

    /// The latest published view.
    pub fn view(&self) -> Arc<View> {
        self.shared.view.borrow().clone()
    }

    /// Waits until the view satisfies `done`.
    pub async fn wait_for(&self, done: impl Fn(&View) -> bool) -> Arc<View> {
        let mut rx = self.shared.view.subscribe();
        let view = rx.wait_for(|v| done(v)).await.expect("sender lives in self").clone();
        view
    }

    /// Waits until no advance is running.
    pub async fn settled(&self) -> Arc<View> {
        self.wait_for(|v| v.status.status != Phase::Advancing).await
    }

    /// Runs `f` on the session from a blocking thread.
    pub async fn with_session<T: Send + 'static>(&self, f: impl FnOnce(&mut Session) -> T + Send + 'static) -> T {
        let shared = Arc::clone(&self.shared);
        tokio::task::spawn_blocking(move || f(&mut shared.session.blocking_lock()))
            .await
            .expect("session task panicked")
    }

    fn publish(shared: &Shared, view: View) {
        shared.view.send_replace(Arc::new(view));
    }

    fn spawn_advance(&self) {
        let shared = Arc::clone(&self.shared);
        tokio::task::spawn_blocking(move || {
            let mut session = shared.session.blocking_lock();
            let result = session.advance_if_complete().and_then(|_| session.write_report());
            match result {
                Ok(summary) => {
                    if let Some(s) = summary {
                        log::info!(
                            "session finished: {} annotations, precision {:?}",
                            s.annotations,
                            s.precision
                        );
                    }
                    Self::publish(&shared, view::build(&session, None, None));
                }
                Err(e) => {
                    log::error!("advancing the session failed: {e}");
                    Self::publish(&shared, view::build(&session, Some(Phase::Failed), Some(e.to_string())));
                }
            }
        });
    }
}

async fn status(State(app): State<AppState>) -> Json<Status> {
    Json(app.view().status.clone())
}

async fn queue(State(app): State<AppState>) -> Json<Vec<PendingItem>> {
    Json(app.view().queue.clone())
}

async fn node(State(app): State<AppState>, UrlPath(id): UrlPath<usize>) -> Response {
    match app.view().details.get(&id) {
        Some(detail) => Json(detail.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("node {id} is not pending")),
    }
}

async fn classes(State(app): State<AppState>) -> Json<Vec<String>> {
    Json(app.shared.classes.clone())
}

async fn label(
    State(app): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> Response {
    let token = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
    if token != Some(app.shared.token.as_str()) {
        return error(StatusCode::UNAUTHORIZED, "missing or wrong session token");
    }
    let Json(request) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()),
    };
    let shared = Arc::clone(&app.shared);
    let submitted = tokio::task::spawn_blocking(move || {
        let mut session = shared.session.blocking_lock();
        let annotator = request.annotator.as_deref().unwrap_or(DEFAULT_ANNOTATOR);
        session.submit(request.node_id, request.answer, annotator)?;
        let complete = session.batch_complete();
        let phase = complete.then_some(Phase::Advancing);
        let view = view::build(&session, phase, None);
        let status = view.status.clone();
        AppState::publish(&shared, view);
        Ok::<_, gosl_core::Error>((status, complete))
    })
    .await
    .expect("label task panicked");
    match submitted {
        Ok((status, complete)) => {
            if complete {
                app.spawn_advance();
            }
            Json(status).into_response()
        }
        Err(gosl_core::Error::Rejected(r)) => {
            let code = match r {
                AnswerRejection::OutOfRange { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                AnswerRejection::AlreadyAnswered(_) | AnswerRejection::NotPending(_) => StatusCode::CONFLICT,
            };
            error(code, r.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// The service's routes.
pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/queue", get(queue))
        .route("/api/node/{id}", get(node))
        .route("/api/label", post(label))
        .route("/api/classes", get(classes))
        .with_state(state)
}

/// Serves the session in `state_dir` on `addr` until it finishes, then
/// returns its summary.
pub async fn serve(state_dir: &Path, addr: SocketAddr, token: &str) -> Result<RunSummary, ServeError> {
    let dir = state_dir.to_path_buf();
    let session = tokio::task::spawn_blocking(move || Session::open(&dir))
        .await
        .expect("open task panicked")?;
    let state = tokio::task::spawn_blocking({
        let token = token.to_string();
        move || AppState::new(session, token)
    })
    .await
    .expect("start task panicked")?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    log::info!("serving {} on http://{}", state_dir.display(), listener.local_addr()?);
    let app = state.clone();
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async move {
            app.wait_for(|v| v.status.finished).await;
        })
        .await?;
    let summary = state.with_session(|s| s.write_report()).await?;
    Ok(summary.expect("session finished before shutdown"))
}
