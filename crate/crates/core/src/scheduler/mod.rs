//! Tag-driven resource pool and preemptive dispatcher.
//!
//! Every resource carries a set of capability tags (roles it can serve) and at
//! most one active tag (the role it serves now). Dispatch prefers idle
//! resources and otherwise preempts occupied ones; a preemption is always
//! reported as a `tag_transition` event so the rollout manager pauses the
//! victim's work before the new role starts.

mod multiplex;
mod priority;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::ControlEvent;
use crate::types::{ResourceId, TaskId};

pub use multiplex::{MultiplexController, Phase, PhaseRecord};
pub use priority::{compute_train_priority, TrainPriority};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityTag {
    Rollout,
    Train,
    Critic,
    Reference,
    Reward,
}

impl fmt::Display for CapabilityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CapabilityTag::Rollout => "rollout",
            CapabilityTag::Train => "train",
            CapabilityTag::Critic => "critic",
            CapabilityTag::Reference => "reference",
            CapabilityTag::Reward => "reward",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedError {
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("resource {0} is already registered")]
    DuplicateResource(ResourceId),
    #[error("resource {0} needs at least one capability tag")]
    EmptyCapabilities(ResourceId),
    #[error("active tag {tag} is not among the capabilities of {resource}")]
    InactiveCapability {
        resource: ResourceId,
        tag: CapabilityTag,
    },
    #[error("no resource holds capability {0}")]
    InsufficientCapability(CapabilityTag),
    #[error("dispatch count must be at least 1")]
    ZeroCount,
    #[error("{field} must be positive and finite, got {value}")]
    Domain { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub resource_id: ResourceId,
    pub capability_tags: BTreeSet<CapabilityTag>,
    #[serde(default)]
    pub active_tag: Option<CapabilityTag>,
    pub peak_flops: f64,
    pub hbm_bandwidth: f64,
}

impl ResourceDescriptor {
    pub fn new(
        id: impl Into<ResourceId>,
        tags: impl IntoIterator<Item = CapabilityTag>,
        peak_flops: f64,
        hbm_bandwidth: f64,
    ) -> Self {
        ResourceDescriptor {
            resource_id: id.into(),
            capability_tags: tags.into_iter().collect(),
            active_tag: None,
            peak_flops,
            hbm_bandwidth,
        }
    }

    pub fn has(&self, tag: CapabilityTag) -> bool {
        self.capability_tags.contains(&tag)
    }

    /// Defined only for train-capable resources.
    pub fn train_priority(&self) -> Option<TrainPriority> {
        if self.has(CapabilityTag::Train) {
            compute_train_priority(self.peak_flops, self.hbm_bandwidth).ok()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: CapabilityTag,
    pub resources: Vec<ResourceId>,
    /// Subset of `resources` whose previous task was interrupted.
    pub preempted: Vec<ResourceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailurePlan {
    pub removed: ResourceDescriptor,
    pub event: ControlEvent,
}

#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    pool: BTreeMap<ResourceId, ResourceDescriptor>,
    outbox: Vec<ControlEvent>,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_resources(
        resources: impl IntoIterator<Item = ResourceDescriptor>,
    ) -> Result<Self, SchedError> {
        let mut s = Scheduler::new();
        for r in resources {
            s.register(r)?;
        }
        s.outbox.clear();
        Ok(s)
    }

    pub fn register(&mut self, descriptor: ResourceDescriptor) -> Result<(), SchedError> {
        let id = descriptor.resource_id.clone();
        if self.pool.contains_key(&id) {
            return Err(SchedError::DuplicateResource(id));
        }
        if descriptor.capability_tags.is_empty() {
            return Err(SchedError::EmptyCapabilities(id));
        }
        if let Some(tag) = descriptor.active_tag {
            if !descriptor.has(tag) {
                return Err(SchedError::InactiveCapability { resource: id, tag });
            }
        }
        compute_train_priority(descriptor.peak_flops, descriptor.hbm_bandwidth)?;
        self.pool.insert(id.clone(), descriptor);
        self.outbox
            .push(ControlEvent::ResourceRestored { resource: id });
        Ok(())
    }

    /// Replaces a resource's capabilities. Emits a tag transition when the
    /// active role is no longer allowed.
    pub fn retag(
        &mut self,
        id: &ResourceId,
        capabilities: BTreeSet<CapabilityTag>,
    ) -> Result<Option<ControlEvent>, SchedError> {
        if capabilities.is_empty() {
            return Err(SchedError::EmptyCapabilities(id.clone()));
        }
        let r = self
            .pool
            .get_mut(id)
            .ok_or_else(|| SchedError::UnknownResource(id.clone()))?;
        r.capability_tags = capabilities;
        let event = match r.active_tag {
            Some(active) if !r.capability_tags.contains(&active) => {
                r.active_tag = None;
                Some(ControlEvent::TagTransition {
                    resource: id.clone(),
                    from: Some(active),
                    to: None,
                })
            }
            _ => None,
        };
        if let Some(e) = &event {
            self.outbox.push(e.clone());
        }
        Ok(event)
    }

    pub fn get(&self, id: &ResourceId) -> Option<&ResourceDescriptor> {
        self.pool.get(id)
    }

    pub fn resources(&self) -> impl Iterator<Item = &ResourceDescriptor> {
        self.pool.values()
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    /// Resources holding `tag`, active or not. Train queries are ordered by
    /// descending train priority, everything else by id.
    pub fn query(&self, tag: CapabilityTag) -> Vec<ResourceId> {
        let mut hits: Vec<&ResourceDescriptor> =
            self.pool.values().filter(|r| r.has(tag)).collect();
        if tag == CapabilityTag::Train {
            hits.sort_by(|a, b| {
                b.train_priority()
                    .cmp(&a.train_priority())
                    .then_with(|| a.resource_id.cmp(&b.resource_id))
            });
        }
        hits.into_iter().map(|r| r.resource_id.clone()).collect()
    }

    /// Resources currently serving `tag`.
    pub fn active(&self, tag: CapabilityTag) -> Vec<ResourceId> {
        self.pool
            .values()
            .filter(|r| r.active_tag == Some(tag))
            .map(|r| r.resource_id.clone())
            .collect()
    }

    /// Assigns up to `count` resources to `task`, idle ones first, preempting
    /// occupied ones in query order when needed.
    pub fn dispatch(
        &mut self,
        task: CapabilityTag,
        count: usize,
    ) -> Result<Assignment, SchedError> {
        if count == 0 {
            return Err(SchedError::ZeroCount);
        }
        let candidates = self.query(task);
        if candidates.is_empty() {
            return Err(SchedError::InsufficientCapability(task));
        }
        let free: Vec<ResourceId> = candidates
            .iter()
            .filter(|id| self.pool[*id].active_tag.is_none())
            .cloned()
            .collect();
        let busy: Vec<ResourceId> = candidates
            .iter()
            .filter(|id| matches!(self.pool[*id].active_tag, Some(t) if t != task))
            .cloned()
            .collect();
        let mut resources = Vec::new();
        let mut preempted = Vec::new();
        for id in free.into_iter().chain(busy).take(count) {
            let r = self.pool.get_mut(&id).expect("candidate exists");
            if let Some(prev) = r.active_tag {
                preempted.push(id.clone());
                self.outbox.push(ControlEvent::TagTransition {
                    resource: id.clone(),
                    from: Some(prev),
                    to: Some(task),
                });
            }
            r.active_tag = Some(task);
            resources.push(id);
        }
        Ok(Assignment {
            task,
            resources,
            preempted,
        })
    }

    /// Marks a resource as serving `tag`.
    pub fn activate(&mut self, id: &ResourceId, tag: CapabilityTag) -> Result<(), SchedError> {
        let r = self
            .pool
            .get_mut(id)
            .ok_or_else(|| SchedError::UnknownResource(id.clone()))?;
        if !r.has(tag) {
            return Err(SchedError::InactiveCapability {
                resource: id.clone(),
                tag,
            });
        }
        r.active_tag = Some(tag);
        Ok(())
    }

    pub fn release(&mut self, id: &ResourceId) -> Result<Option<CapabilityTag>, SchedError> {
        let r = self
            .pool
            .get_mut(id)
            .ok_or_else(|| SchedError::UnknownResource(id.clone()))?;
        Ok(r.active_tag.take())
    }

    /// Removes a failed resource; its in-flight tasks are reported for requeueing.
    pub fn handle_failure(
        &mut self,
        id: &ResourceId,
        in_flight: Vec<TaskId>,
    ) -> Result<FailurePlan, SchedError> {
        let removed = self
            .pool
            .remove(id)
            .ok_or_else(|| SchedError::UnknownResource(id.clone()))?;
        let event = ControlEvent::ResourceFailed {
            resource: id.clone(),
            tasks: in_flight,
        };
        self.outbox.push(event.clone());
        Ok(FailurePlan { removed, event })
    }

    pub(crate) fn emit(&mut self, event: ControlEvent) {
        self.outbox.push(event);
    }

    pub fn drain_events(&mut self) -> Vec<ControlEvent> {
        std::mem::take(&mut self.outbox)
    }

    pub fn snapshot(&self) -> Vec<ResourceDescriptor> {
        self.pool.values().cloned().collect()
    }

    /// Line-delimited pool snapshot.
    pub fn snapshot_lines(&self) -> String {
        self.pool
            .values()
            .map(|r| serde_json::to_string(r).expect("descriptor serializes") + "\n")
            .collect()
    }
}

/// Parses a line-delimited pool snapshot.
pub fn parse_snapshot(text: &str) -> Result<Vec<ResourceDescriptor>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use CapabilityTag::*;

    pub(crate) fn mixed_pool() -> Scheduler {
        let mut nodes = Vec::new();
        for i in 0..4 {
            nodes.push(ResourceDescriptor::new(
                format!("dual-{i}"),
                [Rollout, Train],
                (900 - i * 100) as f64 * 1e12,
                3.35e12,
            ));
        }
        for i in 0..4 {
            nodes.push(ResourceDescriptor::new(
                format!("roll-{i}"),
                [Rollout],
                400e12,
                3.35e12,
            ));
        }
        Scheduler::with_resources(nodes).unwrap()
    }

    fn all_rollout(s: &mut Scheduler) {
        for id in s.query(Rollout) {
            s.activate(&id, Rollout).unwrap();
        }
    }

    #[test]
    fn register_mixed_pool() {
        let s = mixed_pool();
        assert_eq!(s.len(), 8);
        assert_eq!(s.query(Train).len(), 4);
        assert_eq!(s.query(Rollout).len(), 8);
        assert_eq!(
            s.query(Train),
            vec!["dual-0".into(), "dual-1".into(), "dual-2".into(), "dual-3".into()]
                as Vec<ResourceId>
        );
    }

    #[test]
    fn register_rejects_bad_descriptors() {
        let mut s = mixed_pool();
        assert!(matches!(
            s.register(ResourceDescriptor::new("dual-0", [Rollout], 1.0, 1.0)),
            Err(SchedError::DuplicateResource(_))
        ));
        assert!(matches!(
            s.register(ResourceDescriptor::new("x", [], 1.0, 1.0)),
            Err(SchedError::EmptyCapabilities(_))
        ));
        assert!(matches!(
            s.register(ResourceDescriptor::new("y", [Rollout], 0.0, 1.0)),
            Err(SchedError::Domain { .. })
        ));
    }

    #[test]
    fn retag_active_train_node_emits_transition() {
        let mut s = mixed_pool();
        let id: ResourceId = "dual-0".into();
        s.activate(&id, Train).unwrap();
        let ev = s.retag(&id, [Rollout].into()).unwrap();
        assert_eq!(
            ev,
            Some(ControlEvent::TagTransition {
                resource: id.clone(),
                from: Some(Train),
                to: None
            })
        );
        assert_eq!(s.get(&id).unwrap().active_tag, None);
        assert!(s.retag(&id, [Rollout].into()).unwrap().is_none());
        assert!(matches!(
            s.retag(&"ghost".into(), [Rollout].into()),
            Err(SchedError::UnknownResource(_))
        ));
        assert!(s.retag(&id, BTreeSet::new()).is_err());
    }

    #[test]
    fn dispatch_train_preempts_dual_nodes() {
        let mut s = mixed_pool();
        all_rollout(&mut s);
        s.drain_events();
        let a = s.dispatch(Train, 4).unwrap();
        assert_eq!(a.resources.len(), 4);
        assert_eq!(a.preempted, a.resources);
        let events = s.drain_events();
        assert_eq!(events.len(), 4);
        assert!(events.iter().all(|e| matches!(
            e,
            ControlEvent::TagTransition {
                from: Some(Rollout),
                to: Some(Train),
                ..
            }
        )));
        assert_eq!(s.active(Rollout).len(), 4);
    }

    #[test]
    fn idle_train_nodes_dispatched_without_preemption() {
        let mut s = mixed_pool();
        all_rollout(&mut s);
        for i in 0..4 {
            s.register(ResourceDescriptor::new(
                format!("new-{i}"),
                [Rollout, Train],
                2000e12,
                3.35e12,
            ))
            .unwrap();
        }
        let a = s.dispatch(Train, 4).unwrap();
        assert!(a.preempted.is_empty());
        assert!(a.resources.iter().all(|r| r.as_str().starts_with("new-")));
    }

    #[test]
    fn missing_capability_is_an_error() {
        let mut s = mixed_pool();
        assert_eq!(
            s.dispatch(Reward, 1),
            Err(SchedError::InsufficientCapability(Reward))
        );
        assert_eq!(s.dispatch(Train, 0), Err(SchedError::ZeroCount));
    }

    #[test]
    fn failed_node_leaves_pool() {
        let mut s = mixed_pool();
        let plan = s
            .handle_failure(&"dual-1".into(), vec![TaskId(3)])
            .unwrap();
        assert_eq!(
            plan.event,
            ControlEvent::ResourceFailed {
                resource: "dual-1".into(),
                tasks: vec![TaskId(3)]
            }
        );
        assert!(!s.query(Train).contains(&"dual-1".into()));
        assert_eq!(s.dispatch(Train, 4).unwrap().resources.len(), 3);
        assert!(s.handle_failure(&"dual-1".into(), vec![]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let s = mixed_pool();
        let parsed = parse_snapshot(&s.snapshot_lines()).unwrap();
        assert_eq!(parsed, s.snapshot());
    }
}
