//! The trajectory manager: a recording proxy between agents and the engine.
//!
//! Every request is tracked as a [`PendingRequest`]. Interrupted generations are
//! buffered and resumed from their partial output, so the agent only ever sees
//! one contiguous response. Finished (and interrupted) exchanges are merged into
//! the session's [`SessionTrie`] before any response is released.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, GenId, MockEngine, Phase, Step};
use crate::trie::{
    request_meta, CompletionId, CompletionState, InsertOutcome, NodeId, SessionTrie, StorageStats,
};
use crate::types::{GenParams, ModelVersion, SessionId, TokenId, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ProxyError {
    #[error("request input must not be empty")]
    EmptyInput,
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("model switch did not complete within {waited_ms} ms; retry the request")]
    SwitchTimeout { waited_ms: u64 },
    #[error("engine error: {0}")]
    Engine(EngineError),
    #[error("engine unreachable: {0}")]
    Unreachable(String),
}

impl ProxyError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProxyError::SwitchTimeout { .. } | ProxyError::Unreachable(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Forwarded,
    WaitingSwitch,
    Resuming,
    Done,
}

/// A logical agent request, possibly spanning several engine calls.
#[derive(Debug, Clone)]
pub struct PendingRequest {
    pub request_id: u64,
    pub session_id: SessionId,
    pub input: Vec<TokenId>,
    pub params: GenParams,
    /// Output buffered so far, across every engine call.
    pub output: Vec<TokenId>,
    pub versions: Vec<ModelVersion>,
    pub state: RequestState,
    pub interruptions: u32,
    input_version: Option<ModelVersion>,
    gen: Option<GenId>,
}

impl PendingRequest {
    pub fn remaining_budget(&self) -> usize {
        self.params.max_new_tokens - self.output.len()
    }

    pub fn is_done(&self) -> bool {
        self.state == RequestState::Done
    }

    /// Engine generation currently serving this request, if any.
    pub fn generation(&self) -> Option<GenId> {
        self.gen
    }
}

/// Result of advancing a request by one engine step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Progress {
    Token,
    /// The engine is switching; retry after the hint.
    Waiting { retry_after_ms: u64 },
    /// Output so far was buffered; the request must be resumed.
    Interrupted,
    Complete(Vec<TokenId>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManagerConfig {
    /// How long a held request waits for a switch to finish.
    pub switch_wait_timeout_ms: u64,
}

impl Default for TrajectoryManagerConfig {
    fn default() -> Self {
        // Ten times an expected one-second switch.
        TrajectoryManagerConfig {
            switch_wait_timeout_ms: 10_000,
        }
    }
}

/// Identifies a delivered trajectory: the trie leaf it ends at.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrajectoryKey {
    pub session_id: SessionId,
    pub leaf: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredTrajectory {
    pub key: TrajectoryKey,
    pub trajectory: Trajectory,
}

pub struct TrajectoryManager {
    engine: Arc<MockEngine>,
    config: TrajectoryManagerConfig,
    sessions: RwLock<BTreeMap<SessionId, Arc<Mutex<SessionTrie>>>>,
    delivered: Mutex<BTreeSet<TrajectoryKey>>,
    next_request: AtomicU64,
    next_completion: AtomicU64,
}

impl TrajectoryManager {
    pub fn new(engine: Arc<MockEngine>, config: TrajectoryManagerConfig) -> Self {
        TrajectoryManager {
            engine,
            config,
            sessions: RwLock::new(BTreeMap::new()),
            delivered: Mutex::new(BTreeSet::new()),
            next_request: AtomicU64::new(0),
            next_completion: AtomicU64::new(0),
        }
    }

    pub fn engine(&self) -> &Arc<MockEngine> {
        &self.engine
    }

    fn session(&self, id: &SessionId) -> Arc<Mutex<SessionTrie>> {
        if let Some(s) = self.sessions.read().get(id) {
            return s.clone();
        }
        self.sessions
            .write()
            .entry(id.clone())
            .or_insert_with(|| Arc::new(Mutex::new(SessionTrie::new(id.clone()))))
            .clone()
    }

    fn existing_session(&self, id: &SessionId) -> Result<Arc<Mutex<SessionTrie>>, ProxyError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ProxyError::UnknownSession(id.clone()))
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.sessions.read().keys().cloned().collect()
    }

    pub fn begin(
        &self,
        session_id: SessionId,
        input: Vec<TokenId>,
        params: GenParams,
    ) -> Result<PendingRequest, ProxyError> {
        if input.is_empty() {
            return Err(ProxyError::EmptyInput);
        }
        Ok(PendingRequest {
            request_id: self.next_request.fetch_add(1, Ordering::Relaxed),
            session_id,
            input,
            params,
            output: Vec::new(),
            versions: Vec::new(),
            state: RequestState::Forwarded,
            interruptions: 0,
            input_version: None,
            gen: None,
        })
    }

    /// Advances `req` by one engine step, (re)opening a generation when needed.
    pub fn pump(&self, req: &mut PendingRequest) -> Result<Progress, ProxyError> {
        if req.state == RequestState::Done {
            return Ok(Progress::Complete(req.output.clone()));
        }
        let gen = match req.gen {
            Some(g) => g,
            None => match self.engine.open(&req.input, &req.output, &req.params) {
                Ok(g) => {
                    if req.input_version.is_none() {
                        req.input_version = self.engine.admitted_version(g);
                    }
                    req.gen = Some(g);
                    g
                }
                Err(EngineError::Wait { retry_after_ms, .. }) => {
                    req.state = RequestState::WaitingSwitch;
                    return Ok(Progress::Waiting { retry_after_ms });
                }
                Err(e) => return Err(ProxyError::Engine(e)),
            },
        };
        match self.engine.step(gen).map_err(ProxyError::Engine)? {
            Step::Token { .. } => Ok(Progress::Token),
            Step::Done(result) => {
                req.gen = None;
                req.output.extend_from_slice(&result.output_tokens);
                req.versions.extend_from_slice(&result.version_per_token);
                if result.finished {
                    self.record(req, CompletionState::Complete);
                    req.state = RequestState::Done;
                    Ok(Progress::Complete(req.output.clone()))
                } else {
                    if !req.output.is_empty() {
                        self.record(req, CompletionState::Partial);
                    }
                    req.interruptions += 1;
                    req.state = if self.engine.state().phase == Phase::Switching {
                        RequestState::WaitingSwitch
                    } else {
                        RequestState::Resuming
                    };
                    Ok(Progress::Interrupted)
                }
            }
        }
    }

    /// Interrupts the request's live generation and buffers its output.
    pub fn pause(&self, req: &mut PendingRequest) -> Result<(), ProxyError> {
        if let Some(g) = req.gen {
            self.engine.interrupt_ids(&[g]);
            match self.pump(req)? {
                Progress::Interrupted | Progress::Complete(_) => {}
                other => unreachable!("interrupted generation yielded {other:?}"),
            }
        }
        Ok(())
    }

    fn record(&self, req: &PendingRequest, state: CompletionState) -> InsertOutcome {
        let mut seq = req.input.clone();
        seq.extend_from_slice(&req.output);
        let meta = request_meta(
            req.input.len(),
            req.input_version.unwrap_or_default(),
            &req.versions,
        );
        let session = self.session(&req.session_id);
        let mut trie = session.lock();
        let outcome = trie.lpm_insert(&seq, &meta);
        let id = CompletionId(self.next_completion.fetch_add(1, Ordering::Relaxed));
        trie.mark(outcome.end, id, state);
        outcome
    }

    /// Blocking agent-facing call: returns the whole response, hiding interrupts and switches.
    pub fn proxy_generate(
        &self,
        session_id: SessionId,
        input: Vec<TokenId>,
        params: GenParams,
    ) -> Result<Vec<TokenId>, ProxyError> {
        let mut req = self.begin(session_id, input, params)?;
        let timeout = Duration::from_millis(self.config.switch_wait_timeout_ms);
        loop {
            match self.pump(&mut req)? {
                Progress::Token => {}
                Progress::Complete(out) => return Ok(out),
                Progress::Waiting { .. } | Progress::Interrupted => {
                    if !self.engine.wait_until_serving(timeout) {
                        return Err(ProxyError::SwitchTimeout {
                            waited_ms: self.config.switch_wait_timeout_ms,
                        });
                    }
                    if req.state == RequestState::WaitingSwitch {
                        req.state = RequestState::Resuming;
                    }
                }
            }
        }
    }

    pub fn extract_trajectories(
        &self,
        session_id: &SessionId,
        min_version: Option<ModelVersion>,
        include_partial: bool,
    ) -> Result<Vec<Trajectory>, ProxyError> {
        let session = self.existing_session(session_id)?;
        let trie = session.lock();
        Ok(trie
            .extractable_leaves(include_partial)
            .into_iter()
            .map(|leaf| trie.trajectory(leaf))
            .filter(|t| match (min_version, t.oldest_model_version()) {
                (Some(min), Some(oldest)) => oldest >= min,
                _ => true,
            })
            .collect())
    }

    pub fn storage_stats(&self, session_id: &SessionId) -> Result<StorageStats, ProxyError> {
        Ok(self.existing_session(session_id)?.lock().stats())
    }

    /// Runs `f` against a session's trie.
    pub fn with_trie<R>(
        &self,
        session_id: &SessionId,
        f: impl FnOnce(&SessionTrie) -> R,
    ) -> Result<R, ProxyError> {
        Ok(f(&self.existing_session(session_id)?.lock()))
    }

    fn undelivered(&self, delivered: &BTreeSet<TrajectoryKey>) -> Vec<DeliveredTrajectory> {
        let sessions: Vec<_> = self.sessions.read().values().cloned().collect();
        let mut out = Vec::new();
        for s in sessions {
            let trie = s.lock();
            for leaf in trie.complete_leaves() {
                let key = TrajectoryKey {
                    session_id: trie.session_id().clone(),
                    leaf,
                };
                if !delivered.contains(&key) {
                    out.push(DeliveredTrajectory {
                        key,
                        trajectory: trie.trajectory(leaf),
                    });
                }
            }
        }
        out
    }

    /// Complete trajectories not yet handed to the trainer.
    pub fn ready_count(&self) -> usize {
        let delivered = self.delivered.lock();
        self.undelivered(&delivered).len()
    }

    /// Hands out the ready trajectories of the given sessions, each once.
    pub fn drain_sessions(&self, sessions: &[SessionId]) -> Vec<DeliveredTrajectory> {
        let mut delivered = self.delivered.lock();
        let mut out = Vec::new();
        for id in sessions {
            let Some(s) = self.sessions.read().get(id).cloned() else { continue };
            let trie = s.lock();
            for leaf in trie.complete_leaves() {
                let key = TrajectoryKey {
                    session_id: id.clone(),
                    leaf,
                };
                if delivered.insert(key.clone()) {
                    out.push(DeliveredTrajectory {
                        key,
                        trajectory: trie.trajectory(leaf),
                    });
                }
            }
        }
        out
    }

    /// Hands out every ready trajectory once at least `min_samples` are available.
    pub fn drain_batch(&self, min_samples: usize) -> Option<Vec<DeliveredTrajectory>> {
        let mut delivered = self.delivered.lock();
        let ready = self.undelivered(&delivered);
        if ready.is_empty() || ready.len() < min_samples {
            return None;
        }
        delivered.extend(ready.iter().map(|d| d.key.clone()));
        Some(ready)
    }
}
