use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use rollplane_core::dataloader::DataError;
use rollplane_core::engine::EngineError;
use rollplane_core::rollout::RolloutError;
use rollplane_core::scheduler::SchedError;
use rollplane_core::trajectory::ProxyError;

/// JSON error body with an optional Retry-After hint.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: serde_json::Value,
    pub retry_after_ms: Option<u64>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": kind, "message": message.into() }),
            retry_after_ms: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    /// Uses the error's own tagged form; `kind` covers variants serde
    /// cannot tag (newtype variants around strings or integers).
    fn from_serializable<T: serde::Serialize + std::fmt::Display>(
        status: StatusCode,
        kind: &str,
        e: &T,
    ) -> Self {
        let mut body = match serde_json::to_value(e) {
            Ok(v @ serde_json::Value::Object(_)) => v,
            _ => json!({ "error": kind }),
        };
        if let Some(obj) = body.as_object_mut() {
            obj.insert("message".into(), json!(e.to_string()));
        }
        ApiError {
            status,
            body,
            retry_after_ms: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body)).into_response();
        if let Some(ms) = self.retry_after_ms {
            // Retry-After carries whole seconds; the body keeps the exact hint.
            let secs = ms.div_ceil(1000).max(1);
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Wait { .. } => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::InvalidParams { .. } | EngineError::BudgetExhausted { .. } => {
                StatusCode::BAD_REQUEST
            }
            EngineError::VersionRegression { .. } | EngineError::IllegalPhase { .. } => {
                StatusCode::CONFLICT
            }
            EngineError::UnknownGeneration(_) => StatusCode::NOT_FOUND,
        };
        let mut err = ApiError::from_serializable(status, "unknown_generation", &e);
        if let EngineError::Wait { retry_after_ms, .. } = e {
            err.retry_after_ms = Some(retry_after_ms);
        }
        err
    }
}

impl From<ProxyError> for ApiError {
    fn from(e: ProxyError) -> Self {
        match e {
            ProxyError::Engine(inner) => inner.into(),
            other => {
                let status = match &other {
                    ProxyError::EmptyInput => StatusCode::BAD_REQUEST,
                    ProxyError::UnknownSession(_) => StatusCode::NOT_FOUND,
                    ProxyError::SwitchTimeout { .. } | ProxyError::Unreachable(_) => {
                        StatusCode::SERVICE_UNAVAILABLE
                    }
                    ProxyError::Engine(_) => unreachable!(),
                };
                let mut err = ApiError::from_serializable(status, "unknown_session", &other);
                if let Some(obj) = err.body.as_object_mut() {
                    obj.insert("retryable".into(), json!(other.is_retryable()));
                }
                err
            }
        }
    }
}

impl From<RolloutError> for ApiError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Engine(inner) => inner.into(),
            RolloutError::Proxy(inner) => inner.into(),
            other => {
                let status = match &other {
                    RolloutError::StaleVersion { .. }
                    | RolloutError::DuplicateTask(_)
                    | RolloutError::DuplicateLane(_) => StatusCode::CONFLICT,
                    RolloutError::UnknownTask(_) => StatusCode::NOT_FOUND,
                    RolloutError::NoCapacity => StatusCode::SERVICE_UNAVAILABLE,
                    RolloutError::Engine(_) | RolloutError::Proxy(_) => unreachable!(),
                };
                let kind = match &other {
                    RolloutError::DuplicateTask(_) => "duplicate_task",
                    RolloutError::DuplicateLane(_) => "duplicate_lane",
                    _ => "unknown_task",
                };
                ApiError::from_serializable(status, kind, &other)
            }
        }
    }
}

impl From<SchedError> for ApiError {
    fn from(e: SchedError) -> Self {
        let (status, kind) = match &e {
            SchedError::UnknownResource(_) => (StatusCode::NOT_FOUND, "unknown_resource"),
            SchedError::DuplicateResource(_) => (StatusCode::CONFLICT, "duplicate_resource"),
            SchedError::EmptyCapabilities(_) => (StatusCode::BAD_REQUEST, "empty_capabilities"),
            SchedError::InactiveCapability { .. } => (StatusCode::BAD_REQUEST, "inactive_capability"),
            SchedError::InsufficientCapability(_) => {
                (StatusCode::CONFLICT, "insufficient_capability")
            }
            SchedError::ZeroCount => (StatusCode::BAD_REQUEST, "zero_count"),
            SchedError::Domain { .. } => (StatusCode::BAD_REQUEST, "domain"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<DataError> for ApiError {
    fn from(e: DataError) -> Self {
        let status = match &e {
            DataError::UnknownTask(_) => StatusCode::NOT_FOUND,
            DataError::IllegalState { .. } => StatusCode::CONFLICT,
        };
        ApiError::from_serializable(status, "unknown_task", &e)
    }
}

pub(crate) fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}
