use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Assignment, CapabilityTag, FailurePlan, ResourceDescriptor, SchedError, Scheduler};
use crate::events::ControlEvent;
use crate::types::{ResourceId, TaskId};

/// Pipeline phase derived from the active tags across the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Rollout,
    Train,
    /// Rollout and training running side by side.
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub at: u64,
    pub phase: Phase,
    pub active: BTreeMap<ResourceId, CapabilityTag>,
}

/// Drives the rollout/train cycle on top of a [`Scheduler`].
///
/// Every public transition appends a [`PhaseRecord`] stamped with the caller's
/// virtual time, so traces are deterministic. Role changes are queued as
/// `tag_transition` events on the scheduler outbox.
#[derive(Debug, Clone)]
pub struct MultiplexController {
    sched: Scheduler,
    training: bool,
    trace: Vec<PhaseRecord>,
}

impl MultiplexController {
    pub fn new(sched: Scheduler) -> Self {
        MultiplexController {
            sched,
            training: false,
            trace: Vec::new(),
        }
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn scheduler_mut(&mut self) -> &mut Scheduler {
        &mut self.sched
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn phase(&self) -> Phase {
        let mut rollout = false;
        let mut train = false;
        for r in self.sched.resources() {
            match r.active_tag {
                Some(CapabilityTag::Rollout) => rollout = true,
                Some(CapabilityTag::Train) => train = true,
                _ => {}
            }
        }
        match (rollout, train) {
            (false, false) => Phase::Idle,
            (true, false) => Phase::Rollout,
            (false, true) => Phase::Train,
            (true, true) => Phase::Overlap,
        }
    }

    pub fn active_tag(&self, id: &ResourceId) -> Option<CapabilityTag> {
        self.sched.get(id).and_then(|r| r.active_tag)
    }

    pub fn rollout_nodes(&self) -> Vec<ResourceId> {
        self.sched.active(CapabilityTag::Rollout)
    }

    pub fn train_nodes(&self) -> Vec<ResourceId> {
        self.sched.active(CapabilityTag::Train)
    }

    pub fn trace(&self) -> &[PhaseRecord] {
        &self.trace
    }

    /// Phases with consecutive repeats collapsed.
    pub fn phase_sequence(&self) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        for r in &self.trace {
            if out.last() != Some(&r.phase) {
                out.push(r.phase);
            }
        }
        out
    }

    pub fn drain_events(&mut self) -> Vec<ControlEvent> {
        self.sched.drain_events()
    }

    fn record(&mut self, at: u64) {
        let active = self
            .sched
            .resources()
            .filter_map(|r| r.active_tag.map(|t| (r.resource_id.clone(), t)))
            .collect();
        let phase = self.phase();
        self.trace.push(PhaseRecord { at, phase, active });
    }

    fn tags(&self) -> BTreeMap<ResourceId, Option<CapabilityTag>> {
        self.sched
            .resources()
            .map(|r| (r.resource_id.clone(), r.active_tag))
            .collect()
    }

    fn emit_changes(&mut self, before: &BTreeMap<ResourceId, Option<CapabilityTag>>) {
        for (id, to) in self.tags() {
            let from = before.get(&id).copied().flatten();
            if from != to {
                self.sched.emit(ControlEvent::TagTransition {
                    resource: id,
                    from,
                    to,
                });
            }
        }
    }

    fn fill_rollout(&mut self) -> Vec<ResourceId> {
        let idle: Vec<ResourceId> = self
            .sched
            .resources()
            .filter(|r| r.active_tag.is_none() && r.has(CapabilityTag::Rollout))
            .map(|r| r.resource_id.clone())
            .collect();
        for id in &idle {
            self.sched
                .activate(id, CapabilityTag::Rollout)
                .expect("rollout-capable node");
        }
        idle
    }

    /// Puts every idle rollout-capable node to work.
    pub fn start(&mut self, at: u64) -> Vec<ResourceId> {
        let before = self.tags();
        let started = self.fill_rollout();
        self.emit_changes(&before);
        self.record(at);
        started
    }

    /// Batch threshold reached: move every train-capable node to training,
    /// preempting rollout where needed.
    pub fn on_threshold(&mut self, at: u64) -> Result<Assignment, SchedError> {
        let n = self.sched.query(CapabilityTag::Train).len();
        if n == 0 {
            return Err(SchedError::InsufficientCapability(CapabilityTag::Train));
        }
        let a = self.sched.dispatch(CapabilityTag::Train, n)?;
        self.training = true;
        self.record(at);
        Ok(a)
    }

    /// Training finished: release train nodes and return everything that can
    /// roll out to rollout. Returns the nodes newly set to rollout.
    pub fn on_train_complete(&mut self, at: u64) -> Vec<ResourceId> {
        let before = self.tags();
        for id in self.sched.active(CapabilityTag::Train) {
            self.sched.release(&id).expect("active node exists");
        }
        self.training = false;
        let resumed = self.fill_rollout();
        self.emit_changes(&before);
        self.record(at);
        resumed
    }

    /// Removes a failed node. If it was training, training is re-dispatched
    /// onto the remaining train-capable nodes.
    pub fn on_failure(
        &mut self,
        at: u64,
        id: &ResourceId,
        in_flight: Vec<TaskId>,
    ) -> Result<(FailurePlan, Option<Assignment>), SchedError> {
        let was_training = self.active_tag(id) == Some(CapabilityTag::Train);
        let plan = self.sched.handle_failure(id, in_flight)?;
        let mut redispatch = None;
        if was_training && self.training {
            let n = self.sched.query(CapabilityTag::Train).len();
            if n == 0 {
                self.record(at);
                return Err(SchedError::InsufficientCapability(CapabilityTag::Train));
            }
            redispatch = Some(self.sched.dispatch(CapabilityTag::Train, n)?);
        }
        self.record(at);
        Ok((plan, redispatch))
    }

    /// Adds a node. Rollout-capable nodes start rolling out immediately;
    /// train-only nodes wait for the next threshold.
    pub fn on_register(
        &mut self,
        at: u64,
        descriptor: ResourceDescriptor,
    ) -> Result<Option<CapabilityTag>, SchedError> {
        let id = descriptor.resource_id.clone();
        let rollout = descriptor.has(CapabilityTag::Rollout);
        self.sched.register(descriptor)?;
        let tag = if rollout {
            self.sched.activate(&id, CapabilityTag::Rollout)?;
            self.sched.emit(ControlEvent::TagTransition {
                resource: id.clone(),
                from: None,
                to: Some(CapabilityTag::Rollout),
            });
            Some(CapabilityTag::Rollout)
        } else {
            None
        };
        self.record(at);
        Ok(tag)
    }
}
