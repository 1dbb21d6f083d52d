use serde::{Deserialize, Serialize};

use crate::scheduler::CapabilityTag;
use crate::types::{ModelVersion, ResourceId, TaskId};

/// Triggers consumed by the rollout manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlEvent {
    ThresholdReached {
        complete: usize,
        train_capable: Vec<ResourceId>,
    },
    Timeout {
        complete: usize,
        train_capable: Vec<ResourceId>,
    },
    WeightSync {
        version: ModelVersion,
    },
    TagTransition {
        resource: ResourceId,
        from: Option<CapabilityTag>,
        to: Option<CapabilityTag>,
    },
    ResourceRestored {
        resource: ResourceId,
    },
    ResourceFailed {
        resource: ResourceId,
        tasks: Vec<TaskId>,
    },
}

impl ControlEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlEvent::ThresholdReached { .. } => "threshold_reached",
            ControlEvent::Timeout { .. } => "timeout",
            ControlEvent::WeightSync { .. } => "weight_sync",
            ControlEvent::TagTransition { .. } => "tag_transition",
            ControlEvent::ResourceRestored { .. } => "resource_restored",
            ControlEvent::ResourceFailed { .. } => "resource_failed",
        }
    }
}
