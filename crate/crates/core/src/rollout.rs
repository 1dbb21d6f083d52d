//! Rollout manager: decides when rollouts pause and resume and drives weight
//! updates through the engine.
//!
//! Planning is split from execution. [`on_event`] is a pure function of an
//! event and a [`ControllerState`] snapshot; [`RolloutManager::apply_event`]
//! executes the resulting plan. Every applied event is logged together with
//! the snapshot it was planned against, so a log can be re-planned offline.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Phase};
use crate::events::ControlEvent;
use crate::scheduler::CapabilityTag;
use crate::trajectory::{PendingRequest, Progress, ProxyError, TrajectoryManager};
use crate::types::{GenParams, ModelVersion, ResourceId, SessionId, TaskId, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", content = "resources", rename_all = "snake_case")]
pub enum Targets {
    All,
    Resources(Vec<ResourceId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    PauseRollouts { targets: Targets },
    ResumeRollouts { targets: Targets },
    BeginEngineSwitch,
    CompleteEngineSwitch { version: ModelVersion },
    RequestTrainDispatch { resources: Vec<ResourceId> },
    RequeueTasks { tasks: Vec<TaskId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum RolloutError {
    #[error("stale weight sync: requested {requested}, current {current}")]
    StaleVersion {
        current: ModelVersion,
        requested: ModelVersion,
    },
    #[error("task {0} already exists")]
    DuplicateTask(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("no free rollout slot")]
    NoCapacity,
    #[error("lane {0} already exists")]
    DuplicateLane(ResourceId),
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Proxy(ProxyError),
}

impl From<ProxyError> for RolloutError {
    fn from(e: ProxyError) -> Self {
        match e {
            ProxyError::Engine(e) => RolloutError::Engine(e),
            other => RolloutError::Proxy(other),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneState {
    pub slots: usize,
    pub open: bool,
    pub running: Vec<TaskId>,
}

/// Snapshot the planner works from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerState {
    pub version: ModelVersion,
    pub switching: bool,
    /// Set while a global pause is in effect.
    pub held: bool,
    pub lanes: BTreeMap<ResourceId, LaneState>,
    pub paused: Vec<TaskId>,
}

impl ControllerState {
    /// Applies the bookkeeping effect of a command. Task movement is not
    /// modelled here; only version, hold and lane gates.
    pub fn reduce(&mut self, cmd: &Command) {
        match cmd {
            Command::PauseRollouts { targets: Targets::All } => self.held = true,
            Command::PauseRollouts {
                targets: Targets::Resources(rs),
            } => {
                for r in rs {
                    if let Some(l) = self.lanes.get_mut(r) {
                        l.open = false;
                    }
                }
            }
            Command::ResumeRollouts { targets: Targets::All } => self.held = false,
            Command::ResumeRollouts {
                targets: Targets::Resources(rs),
            } => {
                for r in rs {
                    if let Some(l) = self.lanes.get_mut(r) {
                        l.open = true;
                    }
                }
            }
            Command::BeginEngineSwitch => self.switching = true,
            Command::CompleteEngineSwitch { version } => {
                self.switching = false;
                self.version = *version;
            }
            Command::RequestTrainDispatch { .. } => {}
            Command::RequeueTasks { .. } => {}
        }
    }
}

/// Maps an event to an ordered plan.
pub fn on_event(event: &ControlEvent, state: &ControllerState) -> Result<Vec<Command>, RolloutError> {
    use ControlEvent::*;
    Ok(match event {
        ThresholdReached { train_capable, .. } | Timeout { train_capable, .. } => vec![
            Command::PauseRollouts {
                targets: Targets::Resources(train_capable.clone()),
            },
            Command::RequestTrainDispatch {
                resources: train_capable.clone(),
            },
        ],
        WeightSync { version } => {
            if *version <= state.version {
                return Err(RolloutError::StaleVersion {
                    current: state.version,
                    requested: *version,
                });
            }
            vec![
                Command::PauseRollouts { targets: Targets::All },
                Command::BeginEngineSwitch,
                Command::CompleteEngineSwitch { version: *version },
                Command::ResumeRollouts { targets: Targets::All },
            ]
        }
        TagTransition { resource, from, to } => {
            let only = Targets::Resources(vec![resource.clone()]);
            match (from, to) {
                (_, Some(CapabilityTag::Rollout)) => vec![Command::ResumeRollouts { targets: only }],
                (_, Some(_)) | (Some(CapabilityTag::Rollout), None) => {
                    vec![Command::PauseRollouts { targets: only }]
                }
                (_, None) => Vec::new(),
            }
        }
        ResourceRestored { resource } => vec![Command::ResumeRollouts {
            targets: Targets::Resources(vec![resource.clone()]),
        }],
        ResourceFailed { resource, tasks } => {
            let mut all: Vec<TaskId> = tasks.clone();
            if let Some(lane) = state.lanes.get(resource) {
                for t in &lane.running {
                    if !all.contains(t) {
                        all.push(*t);
                    }
                }
            }
            vec![Command::RequeueTasks { tasks: all }]
        }
    })
}

/// Checks the ordering rule for engine switches within one plan.
pub fn plan_is_valid(plan: &[Command]) -> bool {
    for (i, c) in plan.iter().enumerate() {
        if matches!(c, Command::BeginEngineSwitch) {
            let paused_before = plan[..i]
                .iter()
                .any(|c| matches!(c, Command::PauseRollouts { .. }));
            let complete = plan[i + 1..]
                .iter()
                .position(|c| matches!(c, Command::CompleteEngineSwitch { .. }));
            let Some(j) = complete else { return false };
            let resumed_after = plan[i + 1 + j + 1..]
                .iter()
                .any(|c| matches!(c, Command::ResumeRollouts { .. }));
            if !paused_before || !resumed_after {
                return false;
            }
        }
    }
    true
}

/// Work captured from a paused task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialBuffer {
    pub task_id: TaskId,
    pub input: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub versions: Vec<ModelVersion>,
    pub budget_remaining: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Running,
    Paused,
    Done,
}

#[derive(Debug, Clone)]
pub struct RolloutTask {
    pub id: TaskId,
    pub request: PendingRequest,
    pub resource: Option<ResourceId>,
    pub state: TaskState,
}

/// A task that finished during [`RolloutManager::step_all`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finished {
    pub task_id: TaskId,
    pub resource: ResourceId,
    pub output: Vec<TokenId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecReport {
    pub commands: Vec<Command>,
    pub paused: Vec<PartialBuffer>,
    pub resumed: Vec<TaskId>,
    pub requeued: Vec<TaskId>,
    /// Resources the caller should hand to training.
    pub train_dispatch: Option<Vec<ResourceId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub version: ModelVersion,
    pub paused: usize,
    pub resumed: usize,
    /// Virtual ticks spent between begin and complete.
    pub switch_duration: u64,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub at: u64,
    pub state: ControllerState,
    pub event: ControlEvent,
    pub commands: Vec<Command>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Virtual ticks charged for each engine switch.
    #[serde(default)]
    pub switch_ticks: u64,
}

struct Inner {
    tasks: BTreeMap<TaskId, RolloutTask>,
    lanes: BTreeMap<ResourceId, LaneState>,
    paused: VecDeque<TaskId>,
    held: bool,
    clock: u64,
    log: Vec<LogRecord>,
}

pub struct RolloutManager {
    tm: Arc<TrajectoryManager>,
    config: RolloutConfig,
    // Serializes event handling; at most one plan executes at a time.
    control: Mutex<()>,
    inner: Mutex<Inner>,
}

impl RolloutManager {
    pub fn new(tm: Arc<TrajectoryManager>, config: RolloutConfig) -> Self {
        RolloutManager {
            tm,
            config,
            control: Mutex::new(()),
            inner: Mutex::new(Inner {
                tasks: BTreeMap::new(),
                lanes: BTreeMap::new(),
                paused: VecDeque::new(),
                held: false,
                clock: 0,
                log: Vec::new(),
            }),
        }
    }

    pub fn trajectories(&self) -> &Arc<TrajectoryManager> {
        &self.tm
    }

    pub fn clock(&self) -> u64 {
        self.inner.lock().clock
    }

    pub fn advance_clock(&self, ticks: u64) {
        self.inner.lock().clock += ticks;
    }

    pub fn add_lane(&self, resource: ResourceId, slots: usize) -> Result<(), RolloutError> {
        let mut inner = self.inner.lock();
        if inner.lanes.contains_key(&resource) {
            return Err(RolloutError::DuplicateLane(resource));
        }
        inner.lanes.insert(
            resource,
            LaneState {
                slots,
                open: true,
                running: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn state(&self) -> ControllerState {
        let engine = self.tm.engine().state();
        let inner = self.inner.lock();
        ControllerState {
            version: engine.current_version,
            switching: engine.phase == Phase::Switching,
            held: inner.held,
            lanes: inner.lanes.clone(),
            paused: inner.paused.iter().copied().collect(),
        }
    }

    /// Free slots on lanes that currently accept work.
    pub fn free_capacity(&self) -> usize {
        let inner = self.inner.lock();
        if inner.held {
            return 0;
        }
        inner
            .lanes
            .values()
            .filter(|l| l.open)
            .map(|l| l.slots.saturating_sub(l.running.len()))
            .sum()
    }

    pub fn running_count(&self) -> usize {
        self.inner.lock().lanes.values().map(|l| l.running.len()).sum()
    }

    pub fn paused_count(&self) -> usize {
        self.inner.lock().paused.len()
    }

    pub fn task_state(&self, id: TaskId) -> Option<TaskState> {
        self.inner.lock().tasks.get(&id).map(|t| t.state)
    }

    pub fn task_resource(&self, id: TaskId) -> Option<ResourceId> {
        self.inner.lock().tasks.get(&id).and_then(|t| t.resource.clone())
    }

    pub fn tasks_on(&self, resource: &ResourceId) -> Vec<TaskId> {
        self.inner
            .lock()
            .lanes
            .get(resource)
            .map(|l| l.running.clone())
            .unwrap_or_default()
    }

    pub fn task_output(&self, id: TaskId) -> Option<(Vec<TokenId>, Vec<ModelVersion>)> {
        self.inner
            .lock()
            .tasks
            .get(&id)
            .map(|t| (t.request.output.clone(), t.request.versions.clone()))
    }

    fn pick_lane(inner: &Inner) -> Option<ResourceId> {
        if inner.held {
            return None;
        }
        inner
            .lanes
            .iter()
            .filter(|(_, l)| l.open && l.running.len() < l.slots)
            .min_by_key(|(_, l)| l.running.len())
            .map(|(id, _)| id.clone())
    }

    /// Starts a new task on the least loaded open lane.
    pub fn submit(
        &self,
        task_id: TaskId,
        session: SessionId,
        input: Vec<TokenId>,
        params: GenParams,
    ) -> Result<ResourceId, RolloutError> {
        let mut inner = self.inner.lock();
        if inner.tasks.contains_key(&task_id) {
            return Err(RolloutError::DuplicateTask(task_id));
        }
        let lane = Self::pick_lane(&inner).ok_or(RolloutError::NoCapacity)?;
        let request = self.tm.begin(session, input, params)?;
        inner.lanes.get_mut(&lane).expect("picked lane").running.push(task_id);
        inner.tasks.insert(
            task_id,
            RolloutTask {
                id: task_id,
                request,
                resource: Some(lane.clone()),
                state: TaskState::Running,
            },
        );
        Ok(lane)
    }

    /// Advances every running task by one engine step.
    pub fn step_all(&self) -> Result<Vec<Finished>, RolloutError> {
        let mut inner = self.inner.lock();
        let running: Vec<(ResourceId, TaskId)> = inner
            .lanes
            .iter()
            .flat_map(|(r, l)| l.running.iter().map(move |t| (r.clone(), *t)))
            .collect();
        let mut done = Vec::new();
        for (resource, id) in running {
            let task = inner.tasks.get_mut(&id).expect("running task is tracked");
            match self.tm.pump(&mut task.request)? {
                Progress::Token | Progress::Waiting { .. } | Progress::Interrupted => {}
                Progress::Complete(output) => {
                    task.state = TaskState::Done;
                    task.resource = None;
                    inner
                        .lanes
                        .get_mut(&resource)
                        .expect("lane of running task")
                        .running
                        .retain(|t| *t != id);
                    done.push(Finished {
                        task_id: id,
                        resource,
                        output,
                    });
                }
            }
        }
        Ok(done)
    }

    fn buffer(task: &RolloutTask) -> PartialBuffer {
        PartialBuffer {
            task_id: task.id,
            input: task.request.input.clone(),
            generated: task.request.output.clone(),
            versions: task.request.versions.clone(),
            budget_remaining: task.request.remaining_budget(),
        }
    }

    fn pause_locked(
        &self,
        inner: &mut Inner,
        targets: &Targets,
    ) -> Result<Vec<PartialBuffer>, RolloutError> {
        let lanes: Vec<ResourceId> = match targets {
            Targets::All => {
                inner.held = true;
                inner.lanes.keys().cloned().collect()
            }
            Targets::Resources(rs) => {
                for r in rs {
                    if let Some(l) = inner.lanes.get_mut(r) {
                        l.open = false;
                    }
                }
                rs.clone()
            }
        };
        let mut out = Vec::new();
        for r in lanes {
            let Some(lane) = inner.lanes.get_mut(&r) else { continue };
            let ids = std::mem::take(&mut lane.running);
            for id in ids {
                let task = inner.tasks.get_mut(&id).expect("running task is tracked");
                self.tm.pause(&mut task.request)?;
                if task.request.is_done() {
                    // Finished on its final token before the interrupt landed.
                    inner.lanes.get_mut(&r).expect("lane").running.push(id);
                    continue;
                }
                task.state = TaskState::Paused;
                task.resource = None;
                out.push(Self::buffer(task));
                inner.paused.push_back(id);
            }
        }
        Ok(out)
    }

    pub fn pause_rollouts(&self, targets: &Targets) -> Result<Vec<PartialBuffer>, RolloutError> {
        let mut inner = self.inner.lock();
        self.pause_locked(&mut inner, targets)
    }

    fn resume_locked(&self, inner: &mut Inner, targets: &Targets) -> Vec<TaskId> {
        match targets {
            Targets::All => inner.held = false,
            Targets::Resources(rs) => {
                for r in rs {
                    if let Some(l) = inner.lanes.get_mut(r) {
                        l.open = true;
                    }
                }
            }
        }
        let mut resumed = Vec::new();
        while let Some(&id) = inner.paused.front() {
            let Some(lane) = Self::pick_lane(inner) else { break };
            inner.paused.pop_front();
            let task = inner.tasks.get_mut(&id).expect("paused task is tracked");
            task.state = TaskState::Running;
            task.resource = Some(lane.clone());
            inner.lanes.get_mut(&lane).expect("picked lane").running.push(id);
            resumed.push(id);
        }
        resumed
    }

    /// Re-dispatches buffered tasks onto free slots, oldest first. The next
    /// step reopens each one from its buffered prefix.
    pub fn resume_rollouts(&self, targets: &Targets) -> Vec<TaskId> {
        let mut inner = self.inner.lock();
        self.resume_locked(&mut inner, targets)
    }

    /// Detaches tasks from their lanes and queues them ahead of other paused work.
    fn requeue_locked(&self, inner: &mut Inner, tasks: &[TaskId]) -> Result<Vec<TaskId>, RolloutError> {
        let mut out = Vec::new();
        for id in tasks.iter().rev() {
            let Some(task) = inner.tasks.get_mut(id) else { continue };
            if task.state != TaskState::Running {
                continue;
            }
            self.tm.pause(&mut task.request)?;
            let lane = task.resource.take();
            if task.request.is_done() {
                task.state = TaskState::Done;
                continue;
            }
            task.state = TaskState::Paused;
            if let Some(l) = lane.and_then(|l| inner.lanes.get_mut(&l)) {
                l.running.retain(|t| t != id);
            }
            inner.paused.push_front(*id);
            out.push(*id);
        }
        out.reverse();
        Ok(out)
    }

    pub fn remove_lane(&self, resource: &ResourceId) -> Option<LaneState> {
        self.inner.lock().lanes.remove(resource)
    }

    /// Plans `event` against the current state, executes the plan and logs it.
    pub fn apply_event(&self, event: ControlEvent) -> Result<ExecReport, RolloutError> {
        let _serial = self.control.lock();
        self.apply_serialized(event)
    }

    fn apply_serialized(&self, event: ControlEvent) -> Result<ExecReport, RolloutError> {
        let state = self.state();
        let plan = on_event(&event, &state)?;
        let mut report = ExecReport {
            commands: plan.clone(),
            ..Default::default()
        };
        {
            let mut inner = self.inner.lock();
            let seq = inner.log.len() as u64;
            let at = inner.clock;
            inner.log.push(LogRecord {
                seq,
                at,
                state,
                event: event.clone(),
                commands: plan.clone(),
            });
        }
        let failed_lane = match &event {
            ControlEvent::ResourceFailed { resource, .. } => Some(resource.clone()),
            _ => None,
        };
        for cmd in &plan {
            match cmd {
                Command::PauseRollouts { targets } => {
                    report.paused.extend(self.pause_rollouts(targets)?);
                }
                Command::ResumeRollouts { targets } => {
                    report.resumed.extend(self.resume_rollouts(targets));
                }
                Command::BeginEngineSwitch => {
                    self.tm.engine().begin_switch().map_err(RolloutError::Engine)?;
                }
                Command::CompleteEngineSwitch { version } => {
                    self.advance_clock(self.config.switch_ticks);
                    self.tm
                        .engine()
                        .complete_switch(*version)
                        .map_err(RolloutError::Engine)?;
                }
                Command::RequestTrainDispatch { resources } => {
                    report.train_dispatch = Some(resources.clone());
                }
                Command::RequeueTasks { tasks } => {
                    let mut inner = self.inner.lock();
                    report.requeued = self.requeue_locked(&mut inner, tasks)?;
                    if let Some(r) = &failed_lane {
                        inner.lanes.remove(r);
                    }
                }
            }
        }
        Ok(report)
    }

    /// Runs a full weight sync to `version`. Concurrent calls are serialized;
    /// a call whose version is no longer ahead of the engine fails as stale.
    pub fn coordinate_update(&self, version: ModelVersion) -> Result<UpdateReport, RolloutError> {
        let _serial = self.control.lock();
        let start = self.clock();
        let report = self.apply_serialized(ControlEvent::WeightSync { version })?;
        Ok(UpdateReport {
            version: self.tm.engine().current_version(),
            paused: report.paused.len(),
            resumed: report.resumed.len(),
            switch_duration: self.clock() - start,
        })
    }

    pub fn event_log(&self) -> Vec<LogRecord> {
        self.inner.lock().log.clone()
    }

    pub fn event_log_lines(&self) -> String {
        self.inner
            .lock()
            .log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    /// Ids of tasks not yet finished, in id order.
    pub fn unfinished(&self) -> BTreeSet<TaskId> {
        self.inner
            .lock()
            .tasks
            .values()
            .filter(|t| t.state != TaskState::Done)
            .map(|t| t.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EngineConfig, MockEngine};
    use crate::trajectory::TrajectoryManagerConfig;
    use crate::types::tokens;
    use proptest::prelude::*;

    fn manager(lanes: &[(&str, usize)]) -> RolloutManager {
        let engine = Arc::new(MockEngine::new(EngineConfig::default()));
        let tm = Arc::new(TrajectoryManager::new(engine, TrajectoryManagerConfig::default()));
        let rm = RolloutManager::new(tm, RolloutConfig::default());
        for (id, slots) in lanes {
            rm.add_lane((*id).into(), *slots).unwrap();
        }
        rm
    }

    fn submit(rm: &RolloutManager, id: u64, n: usize) -> ResourceId {
        rm.submit(
            TaskId(id),
            SessionId::new(format!("s{id}")),
            tokens(&[1, 2, id as u32 + 3]),
            GenParams::new(n, id),
        )
        .unwrap()
    }

    fn run_to_end(rm: &RolloutManager) -> BTreeMap<TaskId, Vec<TokenId>> {
        let mut out = BTreeMap::new();
        while rm.running_count() > 0 {
            for f in rm.step_all().unwrap() {
                out.insert(f.task_id, f.output);
            }
        }
        out
    }

    #[test]
    fn threshold_plan() {
        let e = ControlEvent::ThresholdReached {
            complete: 4,
            train_capable: vec!["a".into()],
        };
        let plan = on_event(&e, &ControllerState::default()).unwrap();
        assert!(plan
            .iter()
            .any(|c| matches!(c, Command::RequestTrainDispatch { .. })));
        assert!(matches!(plan[0], Command::PauseRollouts { .. }));
    }

    #[test]
    fn weight_sync_plan_order() {
        let plan = on_event(
            &ControlEvent::WeightSync { version: ModelVersion(1) },
            &ControllerState::default(),
        )
        .unwrap();
        assert_eq!(
            plan,
            vec![
                Command::PauseRollouts { targets: Targets::All },
                Command::BeginEngineSwitch,
                Command::CompleteEngineSwitch { version: ModelVersion(1) },
                Command::ResumeRollouts { targets: Targets::All },
            ]
        );
        let err = on_event(
            &ControlEvent::WeightSync { version: ModelVersion(0) },
            &ControllerState::default(),
        );
        assert!(matches!(err, Err(RolloutError::StaleVersion { .. })));
    }

    #[test]
    fn restored_with_nothing_paused_is_noop() {
        let rm = manager(&[("a", 1)]);
        let r = rm
            .apply_event(ControlEvent::ResourceRestored { resource: "a".into() })
            .unwrap();
        assert_eq!(r.commands.len(), 1);
        assert!(r.resumed.is_empty());
    }

    #[test]
    fn pause_nothing_running() {
        let rm = manager(&[("a", 2)]);
        assert!(rm.pause_rollouts(&Targets::All).unwrap().is_empty());
        assert!(rm.resume_rollouts(&Targets::All).is_empty());
    }

    #[test]
    fn pause_at_four_of_ten() {
        let rm = manager(&[("a", 1)]);
        submit(&rm, 0, 10);
        for _ in 0..4 {
            assert!(rm.step_all().unwrap().is_empty());
        }
        let bufs = rm.pause_rollouts(&Targets::All).unwrap();
        assert_eq!(bufs.len(), 1);
        assert_eq!(bufs[0].generated.len(), 4);
        assert_eq!(bufs[0].budget_remaining, 6);
        assert_eq!(rm.task_state(TaskId(0)), Some(TaskState::Paused));
    }

    #[test]
    fn pause_resume_matches_uninterrupted() {
        let reference = manager(&[("a", 1)]);
        submit(&reference, 0, 12);
        let expect = run_to_end(&reference);

        let rm = manager(&[("a", 1)]);
        submit(&rm, 0, 12);
        for _ in 0..5 {
            rm.step_all().unwrap();
        }
        rm.pause_rollouts(&Targets::Resources(vec!["a".into()])).unwrap();
        assert_eq!(rm.free_capacity(), 0);
        assert_eq!(rm.resume_rollouts(&Targets::Resources(vec!["a".into()])), vec![TaskId(0)]);
        assert_eq!(run_to_end(&rm), expect);
    }

    #[test]
    fn resume_respects_capacity() {
        let rm = manager(&[("a", 3)]);
        for i in 0..3 {
            submit(&rm, i, 8);
        }
        rm.step_all().unwrap();
        assert_eq!(rm.pause_rollouts(&Targets::All).unwrap().len(), 3);
        rm.remove_lane(&"a".into());
        rm.add_lane("b".into(), 2).unwrap();
        let resumed = rm.resume_rollouts(&Targets::All);
        assert_eq!(resumed, vec![TaskId(0), TaskId(1)]);
        assert_eq!(rm.paused_count(), 1);
        let mut done = 0;
        while rm.running_count() > 0 {
            done += rm.step_all().unwrap().len();
            let r = rm.resume_rollouts(&Targets::All);
            if !r.is_empty() {
                assert_eq!(r, vec![TaskId(2)]);
            }
        }
        assert_eq!(done, 3);
    }

    #[test]
    fn update_mid_generation() {
        let rm = manager(&[("a", 4)]);
        for i in 0..3 {
            submit(&rm, i, 10);
        }
        for _ in 0..3 {
            rm.step_all().unwrap();
        }
        let rep = rm.coordinate_update(ModelVersion(1)).unwrap();
        assert_eq!(rep.paused, 3);
        assert_eq!(rep.resumed, 3);
        assert_eq!(rep.version, ModelVersion(1));
        let out = run_to_end(&rm);
        for (id, toks) in out {
            assert_eq!(toks.len(), 10);
            let (_, versions) = rm.task_output(id).unwrap();
            assert!(versions[..3].iter().all(|v| *v == ModelVersion(0)));
            assert!(versions[3..].iter().all(|v| *v == ModelVersion(1)));
        }
    }

    #[test]
    fn update_with_nothing_in_flight() {
        let rm = manager(&[]);
        let rep = rm.coordinate_update(ModelVersion(1)).unwrap();
        assert_eq!((rep.paused, rep.resumed), (0, 0));
        assert_eq!(rm.trajectories().engine().current_version(), ModelVersion(1));
    }

    #[test]
    fn concurrent_updates_serialize() {
        let rm = Arc::new(manager(&[("a", 1)]));
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let rm = rm.clone();
                std::thread::spawn(move || rm.coordinate_update(ModelVersion(1)))
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results
            .iter()
            .any(|r| matches!(r, Err(RolloutError::StaleVersion { .. }))));
        assert!(rm.coordinate_update(ModelVersion(2)).is_ok());
    }

    #[test]
    fn tag_transition_pauses_and_resumes_lane() {
        let rm = manager(&[("a", 1), ("b", 1)]);
        submit(&rm, 0, 10);
        submit(&rm, 1, 10);
        rm.step_all().unwrap();
        let r = rm
            .apply_event(ControlEvent::TagTransition {
                resource: "a".into(),
                from: Some(CapabilityTag::Rollout),
                to: Some(CapabilityTag::Train),
            })
            .unwrap();
        assert_eq!(r.paused.len(), 1);
        assert_eq!(rm.tasks_on(&"a".into()), vec![]);
        let r = rm
            .apply_event(ControlEvent::TagTransition {
                resource: "a".into(),
                from: Some(CapabilityTag::Train),
                to: Some(CapabilityTag::Rollout),
            })
            .unwrap();
        assert_eq!(r.resumed.len(), 1);
        assert_eq!(rm.event_log().len(), 2);
    }

    #[test]
    fn failed_lane_requeues_tasks() {
        let rm = manager(&[("a", 1), ("b", 1)]);
        let lane = submit(&rm, 0, 10);
        rm.step_all().unwrap();
        let r = rm
            .apply_event(ControlEvent::ResourceFailed {
                resource: lane.clone(),
                tasks: vec![],
            })
            .unwrap();
        assert_eq!(r.requeued, vec![TaskId(0)]);
        assert_eq!(rm.resume_rollouts(&Targets::All), vec![TaskId(0)]);
        assert_ne!(rm.task_resource(TaskId(0)), Some(lane));
        assert_eq!(run_to_end(&rm)[&TaskId(0)].len(), 10);
    }

    #[test]
    fn log_lines_parse() {
        let rm = manager(&[("a", 1)]);
        rm.coordinate_update(ModelVersion(1)).unwrap();
        let text = rm.event_log_lines();
        let rec: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.event, ControlEvent::WeightSync { version: ModelVersion(1) });
    }

    fn arb_event() -> impl Strategy<Value = ControlEvent> {
        let res = prop::sample::select(vec!["a", "b", "c"]).prop_map(ResourceId::from);
        let tag = prop::option::of(prop::sample::select(vec![
            CapabilityTag::Rollout,
            CapabilityTag::Train,
            CapabilityTag::Reward,
        ]));
        prop_oneof![
            (0usize..10, prop::collection::vec(res.clone(), 0..3))
                .prop_map(|(c, t)| ControlEvent::ThresholdReached { complete: c, train_capable: t }),
            (0usize..10, prop::collection::vec(res.clone(), 0..3))
                .prop_map(|(c, t)| ControlEvent::Timeout { complete: c, train_capable: t }),
            (0u64..6).prop_map(|v| ControlEvent::WeightSync { version: ModelVersion(v) }),
            (res.clone(), tag.clone(), tag)
                .prop_map(|(r, f, t)| ControlEvent::TagTransition { resource: r, from: f, to: t }),
            res.clone().prop_map(|r| ControlEvent::ResourceRestored { resource: r }),
            (res, prop::collection::vec(0u64..5, 0..4)).prop_map(|(r, t)| {
                ControlEvent::ResourceFailed { resource: r, tasks: t.into_iter().map(TaskId).collect() }
            }),
        ]
    }

    proptest! {
        #[test]
        fn every_plan_is_valid(events in prop::collection::vec(arb_event(), 1..30)) {
            let mut state = ControllerState::default();
            for e in &events {
                match on_event(e, &state) {
                    Ok(plan) => {
                        prop_assert!(plan_is_valid(&plan));
                        for c in &plan {
                            state.reduce(c);
                        }
                        prop_assert!(!state.switching);
                    }
                    Err(RolloutError::StaleVersion { current, requested }) => {
                        prop_assert!(requested <= current);
                    }
                    Err(other) => prop_assert!(false, "unexpected {other:?}"),
                }
            }
        }
    }

    #[test]
    fn validity_checker_rejects_bad_orders() {
        assert!(!plan_is_valid(&[Command::BeginEngineSwitch]));
        assert!(!plan_is_valid(&[
            Command::PauseRollouts { targets: Targets::All },
            Command::BeginEngineSwitch,
            Command::ResumeRollouts { targets: Targets::All },
            Command::CompleteEngineSwitch { version: ModelVersion(1) },
        ]));
    }
}
