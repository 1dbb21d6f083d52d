//! The integrated stack on a virtual tick clock: engine, trajectory manager,
//! rollout manager, multiplex controller, dataloader and a stub trainer.
//!
//! One tick:
//! 1. paused requests resume into free slots,
//! 2. follow-up turns of running episodes are submitted,
//! 3. fresh tasks fill the remaining slots,
//! 4. every running request advances one token,
//! 5. the trainer finishes (weight sync, nodes back to rollout) when due,
//! 6. a full batch of finished episodes starts the next training round.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataloader::{DataError, StreamingDataloader, TaskRecord};
use crate::engine::{splitmix64, EngineConfig, MockEngine};
use crate::events::ControlEvent;
use crate::rollout::{RolloutConfig, RolloutError, RolloutManager, Targets};
use crate::scheduler::{CapabilityTag, MultiplexController, ResourceDescriptor, SchedError, Scheduler};
use crate::trajectory::{ProxyError, TrajectoryManager, TrajectoryManagerConfig};
use crate::types::{GenParams, ModelVersion, ResourceId, SessionId, TaskId, TokenId, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub slots_per_node: usize,
    /// Finished episodes per training round.
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub train_ticks: u64,
    /// Tool-result tokens appended between turns.
    pub tool_tokens: usize,
    pub seed: u64,
    pub vocab_size: u32,
    pub max_ticks: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            slots_per_node: 2,
            batch_size: 4,
            max_new_tokens: 16,
            train_ticks: 8,
            tool_tokens: 3,
            seed: 0,
            vocab_size: 32_000,
            max_ticks: 1_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("no progress possible after {ticks} ticks")]
    Stalled { ticks: u64 },
    #[error("task {0} has empty prompt_tokens")]
    EmptyPrompt(TaskId),
}

/// Seed used for turn `turn` of `task`.
pub fn turn_seed(run_seed: u64, task: TaskId, turn: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(task.0) ^ splitmix64(turn as u64 + 1))
}

/// Deterministic tool output inserted after turn `turn` of `task`.
pub fn tool_tokens(task: TaskId, turn: usize, n: usize, vocab: u32) -> Vec<TokenId> {
    (0..n)
        .map(|k| {
            let h = splitmix64(task.0.wrapping_mul(1_000_003) ^ ((turn as u64) << 32) ^ k as u64);
            TokenId((h % vocab as u64) as u32)
        })
        .collect()
}

pub fn session_for(task: TaskId) -> SessionId {
    SessionId::new(format!("task-{}", task.0))
}

struct Episode {
    task: TaskId,
    session: SessionId,
    turn: usize,
    turns: usize,
    context: Vec<TokenId>,
}

struct TrainJob {
    index: usize,
    sessions: Vec<SessionId>,
    until: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedTrajectory {
    pub batch: usize,
    /// Policy version being trained when the trajectory was consumed.
    pub trained_at: ModelVersion,
    pub lag: u64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub ticks: u64,
    pub episodes: usize,
    pub batches: usize,
    pub final_version: ModelVersion,
    pub trained: Vec<TrainedTrajectory>,
}

pub struct Runtime {
    config: RuntimeConfig,
    engine: Arc<MockEngine>,
    tm: Arc<TrajectoryManager>,
    rm: Arc<RolloutManager>,
    ctl: Arc<Mutex<MultiplexController>>,
    loader: Arc<StreamingDataloader>,
    episodes: BTreeMap<u64, Episode>,
    next_request: u64,
    request_owner: BTreeMap<TaskId, u64>,
    follow_ups: VecDeque<(u64, Vec<TokenId>)>,
    finished: VecDeque<SessionId>,
    trainer: Option<TrainJob>,
    batches: usize,
    trained: Vec<TrainedTrajectory>,
    episodes_done: usize,
    tick: u64,
}

impl Runtime {
    pub fn new(
        config: RuntimeConfig,
        cluster: Vec<ResourceDescriptor>,
        loader: Arc<StreamingDataloader>,
    ) -> Result<Self, RuntimeError> {
        let engine = EngineConfig {
            vocab_size: config.vocab_size,
            ..EngineConfig::default()
        };
        Self::with_engine(config, engine, TrajectoryManagerConfig::default(), cluster, loader)
    }

    /// Like [`Runtime::new`] with explicit engine and proxy settings. The
    /// engine's vocabulary is taken from `config.vocab_size`.
    pub fn with_engine(
        config: RuntimeConfig,
        engine: EngineConfig,
        proxy: TrajectoryManagerConfig,
        cluster: Vec<ResourceDescriptor>,
        loader: Arc<StreamingDataloader>,
    ) -> Result<Self, RuntimeError> {
        let engine = Arc::new(MockEngine::new(EngineConfig {
            vocab_size: config.vocab_size,
            ..engine
        }));
        let tm = Arc::new(TrajectoryManager::new(engine.clone(), proxy));
        let rm = Arc::new(RolloutManager::new(tm.clone(), RolloutConfig::default()));
        for r in &cluster {
            if r.has(CapabilityTag::Rollout) {
                rm.add_lane(r.resource_id.clone(), config.slots_per_node)?;
            }
        }
        let ctl = MultiplexController::new(Scheduler::with_resources(cluster)?);
        let mut rt = Runtime {
            config,
            engine,
            tm,
            rm,
            ctl: Arc::new(Mutex::new(ctl)),
            loader,
            episodes: BTreeMap::new(),
            next_request: 0,
            request_owner: BTreeMap::new(),
            follow_ups: VecDeque::new(),
            finished: VecDeque::new(),
            trainer: None,
            batches: 0,
            trained: Vec::new(),
            episodes_done: 0,
            tick: 0,
        };
        rt.ctl.lock().start(0);
        rt.forward_events()?;
        Ok(rt)
    }

    pub fn engine(&self) -> &Arc<MockEngine> {
        &self.engine
    }

    pub fn trajectories(&self) -> &Arc<TrajectoryManager> {
        &self.tm
    }

    pub fn rollout(&self) -> &Arc<RolloutManager> {
        &self.rm
    }

    pub fn controller(&self) -> &Arc<Mutex<MultiplexController>> {
        &self.ctl
    }

    pub fn loader(&self) -> &Arc<StreamingDataloader> {
        &self.loader
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn is_training(&self) -> bool {
        self.trainer.is_some()
    }

    /// Passes controller events to the rollout manager in arrival order.
    fn forward_events(&mut self) -> Result<(), RuntimeError> {
        let events = self.ctl.lock().drain_events();
        for e in events {
            self.rm.apply_event(e)?;
        }
        Ok(())
    }

    fn submit(&mut self, episode: u64, input: Vec<TokenId>) -> Result<(), RuntimeError> {
        let ep = &self.episodes[&episode];
        let params = GenParams::new(
            self.config.max_new_tokens,
            turn_seed(self.config.seed, ep.task, ep.turn),
        );
        let id = TaskId(self.next_request);
        self.next_request += 1;
        self.rm.submit(id, ep.session.clone(), input, params)?;
        self.request_owner.insert(id, episode);
        Ok(())
    }

    fn start_episode(&mut self, rec: TaskRecord) -> Result<(), RuntimeError> {
        if rec.prompt_tokens.is_empty() {
            return Err(RuntimeError::EmptyPrompt(rec.task_id));
        }
        let input: Vec<TokenId> = rec.prompt_tokens.iter().map(|&t| TokenId(t)).collect();
        self.episodes.insert(
            rec.task_id.0,
            Episode {
                task: rec.task_id,
                session: session_for(rec.task_id),
                turn: 0,
                turns: rec.turns(),
                context: input.clone(),
            },
        );
        self.submit(rec.task_id.0, input)
    }

    fn turn_done(&mut self, episode: u64, output: Vec<TokenId>) -> Result<(), RuntimeError> {
        let ep = self.episodes.get_mut(&episode).expect("episode of finished turn");
        ep.context.extend_from_slice(&output);
        ep.turn += 1;
        if ep.turn < ep.turns {
            let mut next = ep.context.clone();
            next.extend(tool_tokens(
                ep.task,
                ep.turn,
                self.config.tool_tokens,
                self.config.vocab_size,
            ));
            ep.context = next.clone();
            self.follow_ups.push_back((episode, next));
        } else {
            let ep = self.episodes.remove(&episode).expect("episode exists");
            self.loader.complete(ep.task)?;
            self.finished.push_back(ep.session);
            self.episodes_done += 1;
        }
        Ok(())
    }

    fn start_training(&mut self) -> Result<(), RuntimeError> {
        let train_capable = self.ctl.lock().scheduler().query(CapabilityTag::Train);
        self.rm.apply_event(ControlEvent::ThresholdReached {
            complete: self.finished.len(),
            train_capable,
        })?;
        self.ctl.lock().on_threshold(self.tick)?;
        self.forward_events()?;
        let n = self.finished.len().min(self.config.batch_size);
        let sessions: Vec<SessionId> = self.finished.drain(..n).collect();
        self.trainer = Some(TrainJob {
            index: self.batches,
            sessions,
            until: self.tick + self.config.train_ticks,
        });
        self.batches += 1;
        Ok(())
    }

    fn finish_training(&mut self) -> Result<(), RuntimeError> {
        let job = self.trainer.take().expect("training in progress");
        let current = self.engine.current_version();
        for d in self.tm.drain_sessions(&job.sessions) {
            let lag = d
                .trajectory
                .oldest_model_version()
                .map(|v| v.lag_behind(current))
                .unwrap_or(0);
            self.trained.push(TrainedTrajectory {
                batch: job.index,
                trained_at: current,
                lag,
                trajectory: d.trajectory,
            });
        }
        self.rm.coordinate_update(current.next())?;
        self.ctl.lock().on_train_complete(self.tick);
        self.forward_events()
    }

    fn work_left(&self) -> bool {
        !self.episodes.is_empty() || self.loader.pending() > 0 || !self.follow_ups.is_empty()
    }

    pub fn is_idle(&self) -> bool {
        !self.work_left() && self.finished.is_empty() && self.trainer.is_none()
    }

    pub fn tick(&mut self) -> Result<(), RuntimeError> {
        self.rm.resume_rollouts(&Targets::Resources(Vec::new()));
        while self.rm.free_capacity() > 0 {
            let Some((episode, input)) = self.follow_ups.pop_front() else { break };
            self.submit(episode, input)?;
        }
        let cap = self.rm.free_capacity();
        for rec in self.loader.next(cap) {
            self.start_episode(rec)?;
        }
        for f in self.rm.step_all()? {
            let episode = self
                .request_owner
                .remove(&f.task_id)
                .expect("request has an owner");
            self.turn_done(episode, f.output)?;
        }
        if self.trainer.as_ref().is_some_and(|j| self.tick >= j.until) {
            self.finish_training()?;
        }
        let flush = !self.work_left() && !self.finished.is_empty();
        if self.trainer.is_none() && (self.finished.len() >= self.config.batch_size || flush) {
            self.start_training()?;
        }
        self.tick += 1;
        self.rm.advance_clock(1);
        Ok(())
    }

    /// Removes a node mid-run. Its requests keep their buffered output and
    /// resume elsewhere; training moves to the remaining train-capable nodes.
    pub fn fail_node(&mut self, id: &ResourceId) -> Result<(), RuntimeError> {
        let tasks = self.rm.tasks_on(id);
        let (_, redispatch) = self.ctl.lock().on_failure(self.tick, id, tasks)?;
        self.forward_events()?;
        self.rm.remove_lane(id);
        if redispatch.is_some() {
            if let Some(job) = self.trainer.as_mut() {
                job.until = self.tick + self.config.train_ticks;
            }
        }
        Ok(())
    }

    /// Ticks until every task is trained, calling `hook` before each tick.
    pub fn run_with(
        &mut self,
        mut hook: impl FnMut(&mut Runtime) -> Result<(), RuntimeError>,
    ) -> Result<RunReport, RuntimeError> {
        while !self.is_idle() {
            if self.tick >= self.config.max_ticks {
                return Err(RuntimeError::Stalled { ticks: self.tick });
            }
            hook(self)?;
            self.tick()?;
        }
        Ok(self.report())
    }

    pub fn run(&mut self) -> Result<RunReport, RuntimeError> {
        self.run_with(|_| Ok(()))
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            ticks: self.tick,
            episodes: self.episodes_done,
            batches: self.batches,
            final_version: self.engine.current_version(),
            trained: self.trained.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{context_hash, next_token};
    use crate::types::Origin;

    fn cluster() -> Vec<ResourceDescriptor> {
        vec![
            ResourceDescriptor::new("dual-0", [CapabilityTag::Rollout, CapabilityTag::Train], 9e14, 3e12),
            ResourceDescriptor::new("dual-1", [CapabilityTag::Rollout, CapabilityTag::Train], 9e14, 3e12),
            ResourceDescriptor::new("roll-0", [CapabilityTag::Rollout], 4e14, 3e12),
            ResourceDescriptor::new("roll-1", [CapabilityTag::Rollout], 4e14, 3e12),
        ]
    }

    fn tasks(n: u64) -> Arc<StreamingDataloader> {
        let d = Arc::new(StreamingDataloader::new());
        let text: String = (0..n)
            .map(|i| {
                format!(
                    "{{\"task_id\":{i},\"prompt_tokens\":[{},{},7],\"meta\":{{\"turns\":{}}}}}\n",
                    i + 1,
                    i % 5,
                    1 + i % 3
                )
            })
            .collect();
        d.load_str(&text).unwrap();
        d
    }

    /// Recomputes every model token from the public hash.
    fn hash_consistent(t: &Trajectory, run_seed: u64, task: TaskId, vocab: u32) -> bool {
        let toks = t.tokens();
        let mut turn = 0;
        let mut prev_model = false;
        let mut pos = 0;
        for span in &t.spans {
            let model = span.origin == Origin::ModelOutput;
            if model {
                for p in pos..pos + span.tokens.len() {
                    let want = next_token(
                        context_hash(&toks[..p]),
                        turn_seed(run_seed, task, turn),
                        span.version,
                        vocab,
                    );
                    if toks[p] != want {
                        return false;
                    }
                }
            } else if prev_model {
                turn += 1;
            }
            prev_model = model;
            pos += span.tokens.len();
        }
        true
    }

    #[test]
    fn twenty_tasks_end_to_end() {
        let cfg = RuntimeConfig::default();
        let mut rt = Runtime::new(cfg.clone(), cluster(), tasks(20)).unwrap();
        let report = rt.run().unwrap();
        assert_eq!(report.episodes, 20);
        assert_eq!(report.trained.len(), 20);
        assert_eq!(report.final_version, ModelVersion(report.batches as u64));
        assert!(rt.loader().is_drained());
        for t in &report.trained {
            let task: u64 = t.trajectory.session_id.as_str()[5..].parse().unwrap();
            assert!(hash_consistent(&t.trajectory, cfg.seed, TaskId(task), cfg.vocab_size));
        }
    }

    #[test]
    fn deterministic() {
        let a = Runtime::new(RuntimeConfig::default(), cluster(), tasks(12)).unwrap().run().unwrap();
        let b = Runtime::new(RuntimeConfig::default(), cluster(), tasks(12)).unwrap().run().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn node_failure_loses_nothing() {
        for victim in ["dual-0", "roll-1"] {
            let cfg = RuntimeConfig::default();
            let mut rt = Runtime::new(cfg.clone(), cluster(), tasks(16)).unwrap();
            let mut failed = false;
            let report = rt
                .run_with(|rt| {
                    if !failed && rt.tick_count() == 30 {
                        failed = true;
                        rt.fail_node(&victim.into())?;
                    }
                    Ok(())
                })
                .unwrap();
            assert!(failed);
            assert_eq!(report.episodes, 16, "victim {victim}");
            for t in &report.trained {
                let task: u64 = t.trajectory.session_id.as_str()[5..].parse().unwrap();
                assert!(hash_consistent(&t.trajectory, cfg.seed, TaskId(task), cfg.vocab_size));
            }
        }
    }
}
