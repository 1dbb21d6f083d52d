use std::sync::Arc;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use rollplane_core::engine::{EngineState, GenerationResult, InterruptedGeneration, MockEngine};
use rollplane_core::{GenParams, ModelVersion, TokenId};

use crate::error::{join_error, ApiError};

#[derive(Debug, Deserialize)]
pub struct GenerateBody {
    pub input: Vec<TokenId>,
    pub params: GenParams,
}

#[derive(Debug, Deserialize)]
pub struct ResumeBody {
    pub prefix: Vec<TokenId>,
    pub input: Vec<TokenId>,
    pub params: GenParams,
}

#[derive(Debug, Deserialize)]
pub struct SwitchBody {
    pub version: ModelVersion,
}

#[derive(Debug, Serialize)]
pub struct Interrupted {
    pub interrupted: Vec<InterruptedGeneration>,
}

type Engine = Arc<MockEngine>;

async fn generate(
    State(e): State<Engine>,
    Json(b): Json<GenerateBody>,
) -> Result<Json<GenerationResult>, ApiError> {
    let r = tokio::task::spawn_blocking(move || e.generate(&b.input, &b.params))
        .await
        .map_err(join_error)??;
    Ok(Json(r))
}

async fn resume(
    State(e): State<Engine>,
    Json(b): Json<ResumeBody>,
) -> Result<Json<GenerationResult>, ApiError> {
    let r = tokio::task::spawn_blocking(move || e.resume_from(&b.prefix, &b.input, &b.params))
        .await
        .map_err(join_error)??;
    Ok(Json(r))
}

async fn interrupt(State(e): State<Engine>) -> Json<Interrupted> {
    Json(Interrupted {
        interrupted: e.interrupt(),
    })
}

async fn begin_switch(State(e): State<Engine>) -> Result<Json<EngineState>, ApiError> {
    Ok(Json(e.begin_switch()?))
}

async fn complete_switch(
    State(e): State<Engine>,
    Json(b): Json<SwitchBody>,
) -> Result<Json<EngineState>, ApiError> {
    Ok(Json(e.complete_switch(b.version)?))
}

async fn state(State(e): State<Engine>) -> Json<EngineState> {
    Json(e.state())
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/engine/generate", post(generate))
        .route("/engine/resume", post(resume))
        .route("/engine/control/interrupt", post(interrupt))
        .route("/engine/control/begin_switch", post(begin_switch))
        .route("/engine/control/complete_switch", post(complete_switch))
        .route("/engine/state", get(state))
        .with_state(engine)
}
