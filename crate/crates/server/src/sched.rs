use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use rollplane_core::events::ControlEvent;
use rollplane_core::rollout::RolloutManager;
use rollplane_core::scheduler::{
    Assignment, CapabilityTag, MultiplexController, ResourceDescriptor,
};
use rollplane_core::{ResourceId, TaskId};

use crate::error::{join_error, ApiError};

#[derive(Clone)]
struct Ctx {
    ctl: Arc<Mutex<MultiplexController>>,
    rm: Arc<RolloutManager>,
}

impl Ctx {
    /// Hands queued scheduler events to the rollout manager.
    async fn forward(&self) -> Result<Vec<ControlEvent>, ApiError> {
        let events = self.ctl.lock().drain_events();
        let rm = self.rm.clone();
        let sent = events.clone();
        tokio::task::spawn_blocking(move || {
            for e in events {
                rm.apply_event(e)?;
            }
            Ok::<_, rollplane_core::rollout::RolloutError>(())
        })
        .await
        .map_err(join_error)??;
        Ok(sent)
    }
}

#[derive(Debug, Deserialize)]
pub struct RetagBody {
    pub resource_id: ResourceId,
    pub capability_tags: BTreeSet<CapabilityTag>,
}

#[derive(Debug, Deserialize)]
pub struct DispatchBody {
    pub task: CapabilityTag,
    pub count: usize,
}

#[derive(Debug, Deserialize)]
pub struct FailBody {
    pub resource_id: ResourceId,
    /// Defaults to the tasks the rollout manager has running there.
    #[serde(default)]
    pub tasks: Option<Vec<TaskId>>,
}

#[derive(Debug, Deserialize)]
pub struct PoolQuery {
    #[serde(default)]
    pub format: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EventsReply {
    pub events: Vec<ControlEvent>,
}

#[derive(Debug, Serialize)]
pub struct DispatchReply {
    pub assignment: Assignment,
    pub events: Vec<ControlEvent>,
}

async fn register(
    State(c): State<Ctx>,
    Json(d): Json<ResourceDescriptor>,
) -> Result<Json<EventsReply>, ApiError> {
    let at = c.rm.clock();
    c.ctl.lock().on_register(at, d)?;
    Ok(Json(EventsReply {
        events: c.forward().await?,
    }))
}

async fn retag(State(c): State<Ctx>, Json(b): Json<RetagBody>) -> Result<Json<EventsReply>, ApiError> {
    c.ctl
        .lock()
        .scheduler_mut()
        .retag(&b.resource_id, b.capability_tags)?;
    Ok(Json(EventsReply {
        events: c.forward().await?,
    }))
}

async fn pool(State(c): State<Ctx>, Query(q): Query<PoolQuery>) -> Response {
    let ctl = c.ctl.lock();
    if q.format.as_deref() == Some("jsonl") {
        (
            [(header::CONTENT_TYPE, "application/x-ndjson")],
            ctl.scheduler().snapshot_lines(),
        )
            .into_response()
    } else {
        Json(ctl.scheduler().snapshot()).into_response()
    }
}

async fn dispatch(
    State(c): State<Ctx>,
    Json(b): Json<DispatchBody>,
) -> Result<Json<DispatchReply>, ApiError> {
    let assignment = c.ctl.lock().scheduler_mut().dispatch(b.task, b.count)?;
    Ok(Json(DispatchReply {
        assignment,
        events: c.forward().await?,
    }))
}

async fn fail(State(c): State<Ctx>, Json(b): Json<FailBody>) -> Result<Json<EventsReply>, ApiError> {
    let tasks = b.tasks.unwrap_or_else(|| c.rm.tasks_on(&b.resource_id));
    let at = c.rm.clock();
    c.ctl.lock().on_failure(at, &b.resource_id, tasks)?;
    Ok(Json(EventsReply {
        events: c.forward().await?,
    }))
}

pub fn router(ctl: Arc<Mutex<MultiplexController>>, rm: Arc<RolloutManager>) -> Router {
    Router::new()
        .route("/sched/register", post(register))
        .route("/sched/retag", post(retag))
        .route("/sched/pool", get(pool))
        .route("/sched/dispatch", post(dispatch))
        .route("/sched/fail", post(fail))
        .with_state(Ctx { ctl, rm })
}
