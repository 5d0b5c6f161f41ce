//! HTTP interface to the engine.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/v1/users/{id}/messages` | `{role, content, timestamp}` |
//! | POST | `/v1/users/{id}/flush` | none |
//! | POST | `/v1/users/{id}/search` | `{query, k?}` |
//! | POST | `/v1/users/{id}/answer` | `{question, k?}` |
//! | POST | `/v1/admin/drain` | `{user_id?, timeout_ms?}` or none |
//! | GET | `/v1/users/{id}/episodes?offset=&limit=` | |
//! | GET | `/v1/users/{id}/facts?offset=&limit=` | |
//!
//! Engine calls block, so handlers run them on the blocking pool.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use epimem_core::segmentation::TriggerCause;
use epimem_core::{BoundaryDecision, Engine, EngineError, Message, UserId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::qa::{answer, AnswerError};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub drain_timeout: Duration,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/users/{id}/messages", post(append_message))
        .route("/v1/users/{id}/flush", post(flush))
        .route("/v1/users/{id}/search", post(search))
        .route("/v1/users/{id}/answer", post(answer_question))
        .route("/v1/users/{id}/episodes", get(list_episodes))
        .route("/v1/users/{id}/facts", get(list_facts))
        .route("/v1/admin/drain", post(drain))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    extra: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            extra: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Model(_) => StatusCode::BAD_REQUEST,
            EngineError::DrainTimeout { .. } => StatusCode::GATEWAY_TIMEOUT,
            err if err.is_provider_unavailable() => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::Llm(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let extra = match &e {
            EngineError::DrainTimeout { stuck } => Some(json!({ "stuck": stuck })),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            extra,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let (Some(extra), Some(map)) = (self.extra, body.as_object_mut()) {
            if let Some(fields) = extra.as_object() {
                map.extend(fields.clone());
            }
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn parse_user(id: &str) -> Result<UserId, ApiError> {
    UserId::new(id).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AppendSummary {
    pub triggered: bool,
    pub trigger_cause: TriggerCause,
    pub decision: BoundaryDecision,
    pub segment_len: usize,
    pub episode_id: Option<String>,
    pub buffered: usize,
    #[serde(default)]
    pub parse_failed: bool,
    #[serde(default)]
    pub clamped: bool,
}

async fn append_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<AppendSummary> {
    let user = parse_user(&id)?;
    let message: Message = parse_body(&body)?;
    blocking(move || {
        let engine = &state.engine;
        let result = engine.append_message(&user, message)?;
        let seg = result.segmentation;
        Ok(Json(AppendSummary {
            triggered: seg.triggered,
            trigger_cause: seg.trigger_cause,
            decision: seg.decision,
            segment_len: seg.segment.as_ref().map_or(0, Vec::len),
            episode_id: result.episode.map(|e| e.id.clone()),
            buffered: engine.buffered(&user).len(),
            parse_failed: seg.parse_failed,
            clamped: seg.clamped,
        }))
    })
    .await
}

async fn flush(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<serde_json::Value> {
    let user = parse_user(&id)?;
    blocking(move || {
        let episode = state.engine.flush_session(&user)?;
        Ok(Json(json!({ "episode_id": episode.map(|e| e.id.clone()) })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchBody {
    query: String,
    #[serde(default)]
    k: Option<usize>,
}

async fn search(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<epimem_core::MemoryContext> {
    let user = parse_user(&id)?;
    let body: SearchBody = parse_body(&body)?;
    if body.query.trim().is_empty() {
        return Err(ApiError::bad_request("query must not be empty"));
    }
    blocking(move || {
        let mut cfg = state.engine.config().clone();
        if let Some(k) = body.k {
            cfg.top_k_episodes = k;
            cfg.raw_text_episode_count = cfg.raw_text_episode_count.min(k);
        }
        Ok(Json(state.engine.assemble_context_with(
            &user,
            &body.query,
            &cfg,
        )?))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    question: String,
    #[serde(default)]
    k: Option<usize>,
}

async fn answer_question(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<crate::qa::Answer> {
    let user = parse_user(&id)?;
    let body: AnswerBody = parse_body(&body)?;
    if body.question.trim().is_empty() {
        return Err(ApiError::bad_request("question must not be empty"));
    }
    blocking(move || {
        answer(&state.engine, &user, &body.question, body.k)
            .map(Json)
            .map_err(|AnswerError { context, source }| {
                let mut err = ApiError::from(source);
                err.extra = context.map(|c| json!({ "context": c }));
                err
            })
    })
    .await
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    100
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PageOf<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

fn page<T: Clone>(all: Vec<Arc<T>>, page: &Page) -> PageOf<T> {
    let total = all.len();
    let items = all
        .into_iter()
        .skip(page.offset)
        .take(page.limit)
        .map(|a| (*a).clone())
        .collect();
    PageOf {
        items,
        total,
        offset: page.offset,
        limit: page.limit,
    }
}

fn known_user(state: &AppState, id: &str) -> Result<UserId, ApiError> {
    let user = parse_user(id)?;
    if !state.engine.knows_user(&user) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown user {user}"),
        ));
    }
    Ok(user)
}

async fn list_episodes(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<Page>,
) -> ApiResult<PageOf<epimem_core::Episode>> {
    let user = known_user(&state, &id)?;
    Ok(Json(page(state.engine.episodes(&user), &p)))
}

async fn list_facts(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<Page>,
) -> ApiResult<PageOf<epimem_core::SemanticFact>> {
    let user = known_user(&state, &id)?;
    Ok(Json(page(state.engine.facts(&user), &p)))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrainBody {
    #[serde(default)]
    user_id: Option<String>,
    #[serde(default)]
    timeout_ms: Option<u64>,
}

async fn drain(State(state): State<AppState>, body: Bytes) -> ApiResult<serde_json::Value> {
    let body: DrainBody = if body.iter().all(u8::is_ascii_whitespace) {
        DrainBody::default()
    } else {
        parse_body(&body)?
    };
    let user = body.user_id.as_deref().map(parse_user).transpose()?;
    let timeout = body
        .timeout_ms
        .map(Duration::from_millis)
        .unwrap_or(state.drain_timeout);
    blocking(move || {
        state.engine.drain(user.as_ref(), timeout)?;
        Ok(Json(json!({ "drained": true })))
    })
    .await
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
