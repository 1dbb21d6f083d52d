use std::sync::Arc;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use rollplane_core::events::ControlEvent;
use rollplane_core::rollout::{ControllerState, ExecReport, RolloutManager, UpdateReport};
use rollplane_core::ModelVersion;

use crate::error::{join_error, ApiError};

#[derive(Debug, Deserialize)]
pub struct UpdateBody {
    pub version: ModelVersion,
}

type Rm = Arc<RolloutManager>;

async fn event(State(rm): State<Rm>, Json(e): Json<ControlEvent>) -> Result<Json<ExecReport>, ApiError> {
    let r = tokio::task::spawn_blocking(move || rm.apply_event(e))
        .await
        .map_err(join_error)??;
    Ok(Json(r))
}

async fn update(State(rm): State<Rm>, Json(b): Json<UpdateBody>) -> Result<Json<UpdateReport>, ApiError> {
    let r = tokio::task::spawn_blocking(move || rm.coordinate_update(b.version))
        .await
        .map_err(join_error)??;
    Ok(Json(r))
}

async fn state(State(rm): State<Rm>) -> Json<ControllerState> {
    Json(rm.state())
}

pub fn router(rm: Rm) -> Router {
    Router::new()
        .route("/ctl/event", post(event))
        .route("/ctl/update", post(update))
        .route("/ctl/state", get(state))
        .with_state(rm)
}
