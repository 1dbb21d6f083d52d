use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use rollplane_core::trajectory::TrajectoryManager;
use rollplane_core::trie::StorageStats;
use rollplane_core::{GenParams, ModelVersion, SessionId, TokenId, TrajectoryRecord};

use crate::error::{join_error, ApiError};

pub const SESSION_HEADER: &str = "x-session-id";

#[derive(Clone)]
struct Ctx {
    tm: Arc<TrajectoryManager>,
    anon: Arc<AtomicU64>,
}

#[derive(Debug, Deserialize)]
pub struct ChatBody {
    #[serde(default)]
    pub session_id: Option<SessionId>,
    pub tokens: Vec<TokenId>,
    pub params: GenParams,
}

#[derive(Debug, Serialize)]
pub struct ChatReply {
    pub session_id: SessionId,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Deserialize)]
pub struct DrainBody {
    pub min_samples: usize,
}

#[derive(Debug, Serialize)]
pub struct Delivered {
    pub leaf: usize,
    #[serde(flatten)]
    pub record: TrajectoryRecord,
}

#[derive(Debug, Serialize)]
pub struct DrainReply {
    pub ready: bool,
    pub trajectories: Vec<Delivered>,
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    #[serde(default)]
    pub min_version: Option<u64>,
    #[serde(default)]
    pub include_partial: bool,
}

#[derive(Debug, Serialize)]
pub struct SessionReply {
    pub session_id: SessionId,
    pub trajectories: Vec<TrajectoryRecord>,
}

async fn chat(
    State(c): State<Ctx>,
    headers: HeaderMap,
    Json(b): Json<ChatBody>,
) -> Result<Json<ChatReply>, ApiError> {
    let header = headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(SessionId::from);
    let session = match b.session_id.or(header) {
        Some(s) => s,
        // No session given: this request is a session of its own.
        None => SessionId::new(format!("anon-{}", c.anon.fetch_add(1, Ordering::Relaxed))),
    };
    let s = session.clone();
    let tm = c.tm.clone();
    let tokens = tokio::task::spawn_blocking(move || tm.proxy_generate(s, b.tokens, b.params))
        .await
        .map_err(join_error)??;
    Ok(Json(ChatReply {
        session_id: session,
        tokens,
    }))
}

async fn drain(State(c): State<Ctx>, Json(b): Json<DrainBody>) -> Result<Json<DrainReply>, ApiError> {
    if b.min_samples == 0 {
        return Err(ApiError::bad_request("min_samples must be positive"));
    }
    Ok(Json(match c.tm.drain_batch(b.min_samples) {
        Some(batch) => DrainReply {
            ready: true,
            trajectories: batch
                .into_iter()
                .map(|d| Delivered {
                    leaf: d.key.leaf.0,
                    record: d.trajectory.to_record(),
                })
                .collect(),
        },
        None => DrainReply {
            ready: false,
            trajectories: Vec::new(),
        },
    }))
}

async fn session(
    State(c): State<Ctx>,
    Path(id): Path<String>,
    Query(q): Query<SessionQuery>,
) -> Result<Json<SessionReply>, ApiError> {
    let id = SessionId::new(id);
    let ts = c
        .tm
        .extract_trajectories(&id, q.min_version.map(ModelVersion), q.include_partial)?;
    Ok(Json(SessionReply {
        session_id: id,
        trajectories: ts.iter().map(|t| t.to_record()).collect(),
    }))
}

async fn stats(State(c): State<Ctx>, Path(id): Path<String>) -> Result<Json<StorageStats>, ApiError> {
    Ok(Json(c.tm.storage_stats(&SessionId::new(id))?))
}

pub fn router(tm: Arc<TrajectoryManager>) -> Router {
    Router::new()
        .route("/v1/generate", post(chat))
        .route("/traj/drain", post(drain))
        .route("/traj/session/{id}", get(session))
        .route("/traj/stats/{id}", get(stats))
        .with_state(Ctx {
            tm,
            anon: Arc::new(AtomicU64::new(0)),
        })
}
