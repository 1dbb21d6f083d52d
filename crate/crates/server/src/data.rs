use std::sync::Arc;

use axum::extract::{Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use rollplane_core::dataloader::{LoaderStats, StreamingDataloader, TaskRecord};
use rollplane_core::TaskId;

use crate::error::ApiError;

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub capacity: usize,
}

#[derive(Debug, Serialize)]
pub struct NextReply {
    pub tasks: Vec<TaskRecord>,
}

#[derive(Debug, Deserialize)]
pub struct TaskBody {
    pub task_id: TaskId,
}

type Loader = Arc<StreamingDataloader>;

async fn next(State(d): State<Loader>, Query(q): Query<NextQuery>) -> Json<NextReply> {
    Json(NextReply {
        tasks: d.next(q.capacity),
    })
}

async fn complete(State(d): State<Loader>, Json(b): Json<TaskBody>) -> Result<Json<LoaderStats>, ApiError> {
    d.complete(b.task_id)?;
    Ok(Json(d.stats()))
}

async fn requeue(State(d): State<Loader>, Json(b): Json<TaskBody>) -> Result<Json<LoaderStats>, ApiError> {
    d.requeue(b.task_id)?;
    Ok(Json(d.stats()))
}

async fn stats(State(d): State<Loader>) -> Json<LoaderStats> {
    Json(d.stats())
}

pub fn router(loader: Loader) -> Router {
    Router::new()
        .route("/data/next", get(next))
        .route("/data/complete", post(complete))
        .route("/data/requeue", post(requeue))
        .route("/data/stats", get(stats))
        .with_state(loader)
}
