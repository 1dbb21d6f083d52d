//! Deterministic stand-in for the serving engine.
//!
//! The "model" is a keyed hash: the next token of a generation is
//!
//! ```text
//! ctx   = FNV-1a-64 over the little-endian u32 bytes of (input ++ output so far)
//! token = splitmix64(ctx ^ splitmix64(seed) ^ splitmix64(version ^ GOLDEN)) mod vocab
//! ```
//!
//! so a weight sync is visible in the output stream while identical calls stay
//! reproducible. Generations advance one token per [`MockEngine::step`]; the
//! blocking [`MockEngine::generate`] and [`MockEngine::resume_from`] simply step
//! until done, so interrupts always land between tokens.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{GenParams, ModelVersion, TokenId};

pub const DEFAULT_VOCAB_SIZE: u32 = 32_000;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds one token into a running FNV-1a context hash.
pub fn extend_context(mut state: u64, token: TokenId) -> u64 {
    for b in token.0.to_le_bytes() {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

pub fn context_hash(tokens: &[TokenId]) -> u64 {
    tokens.iter().fold(FNV_OFFSET, |s, &t| extend_context(s, t))
}

/// The token the engine emits after a context with hash `ctx`.
pub fn next_token(ctx: u64, seed: u64, version: ModelVersion, vocab_size: u32) -> TokenId {
    let mixed = splitmix64(ctx ^ splitmix64(seed) ^ splitmix64(version.0 ^ GOLDEN));
    TokenId((mixed % u64::from(vocab_size)) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Serving,
    Switching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineState {
    pub phase: Phase,
    pub current_version: ModelVersion,
    /// Id of the switch in progress (or the last one completed).
    pub switch_id: u64,
    pub in_flight: usize,
    /// Virtual step clock: total tokens produced so far.
    pub clock: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub input_tokens: Vec<TokenId>,
    /// Tokens produced by this call only; a resumed call excludes its prefix.
    pub output_tokens: Vec<TokenId>,
    pub version_per_token: Vec<ModelVersion>,
    pub finished: bool,
    /// Engine version when the call was admitted.
    pub admitted_version: ModelVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum EngineError {
    #[error("engine is switching models (switch {switch_id}); retry after {retry_after_ms} ms")]
    Wait { switch_id: u64, retry_after_ms: u64 },
    #[error("invalid generation parameters: {reason}")]
    InvalidParams { reason: String },
    #[error("prefix of {prefix_len} tokens exhausts the budget of {max_new_tokens}")]
    BudgetExhausted {
        prefix_len: usize,
        max_new_tokens: usize,
    },
    #[error("cannot switch to {requested}: engine already serves {current}")]
    VersionRegression {
        current: ModelVersion,
        requested: ModelVersion,
    },
    #[error("operation requires phase {expected:?} but engine is {actual:?}")]
    IllegalPhase { expected: Phase, actual: Phase },
    #[error("unknown generation {0:?}")]
    UnknownGeneration(GenId),
}

impl EngineError {
    pub fn is_wait(&self) -> bool {
        matches!(self, EngineError::Wait { .. })
    }
}

/// Outcome of advancing a generation by one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Token {
        token: TokenId,
        version: ModelVersion,
    },
    Done(GenerationResult),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterruptedGeneration {
    pub gen: GenId,
    pub result: GenerationResult,
}

/// One closed engine call, kept for oracle comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub gen: GenId,
    pub seed: u64,
    pub input: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub versions: Vec<ModelVersion>,
    pub finished: bool,
}

impl OracleRecord {
    /// input ++ prefix ++ output.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut s = self.input.clone();
        s.extend_from_slice(&self.prefix);
        s.extend_from_slice(&self.output);
        s
    }
}

/// Reported to the step hook after every produced token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTick {
    pub clock: u64,
    pub gen: GenId,
    /// Tokens produced by this call so far, the new one included.
    pub produced: usize,
    pub version: ModelVersion,
}

pub type StepHook = Arc<dyn Fn(StepTick) + Send + Sync>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub vocab_size: u32,
    pub record_log: bool,
    pub retry_after_ms: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            record_log: true,
            retry_after_ms: 50,
        }
    }
}

struct InFlight {
    input: Vec<TokenId>,
    prefix: Vec<TokenId>,
    params: GenParams,
    output: Vec<TokenId>,
    versions: Vec<ModelVersion>,
    ctx: u64,
    interrupted: bool,
    admitted_version: ModelVersion,
}

impl InFlight {
    fn result(&self, finished: bool) -> GenerationResult {
        GenerationResult {
            input_tokens: self.input.clone(),
            output_tokens: self.output.clone(),
            version_per_token: self.versions.clone(),
            finished,
            admitted_version: self.admitted_version,
        }
    }
}

struct Inner {
    phase: Phase,
    version: ModelVersion,
    switch_id: u64,
    next_gen: u64,
    clock: u64,
    in_flight: BTreeMap<GenId, InFlight>,
    log: Vec<OracleRecord>,
}

pub struct MockEngine {
    config: EngineConfig,
    inner: Mutex<Inner>,
    serving: Condvar,
    hook: RwLock<Option<StepHook>>,
}

impl Default for MockEngine {
    fn default() -> Self {
        MockEngine::new(EngineConfig::default())
    }
}

impl MockEngine {
    pub fn new(config: EngineConfig) -> Self {
        MockEngine {
            config,
            inner: Mutex::new(Inner {
                phase: Phase::Serving,
                version: ModelVersion::INITIAL,
                switch_id: 0,
                next_gen: 0,
                clock: 0,
                in_flight: BTreeMap::new(),
                log: Vec::new(),
            }),
            serving: Condvar::new(),
            hook: RwLock::new(None),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> u32 {
        self.config.vocab_size
    }

    pub fn set_step_hook(&self, hook: Option<StepHook>) {
        *self.hook.write() = hook;
    }

    pub fn state(&self) -> EngineState {
        let inner = self.inner.lock();
        EngineState {
            phase: inner.phase,
            current_version: inner.version,
            switch_id: inner.switch_id,
            in_flight: inner.in_flight.values().filter(|g| !g.interrupted).count(),
            clock: inner.clock,
        }
    }

    pub fn current_version(&self) -> ModelVersion {
        self.inner.lock().version
    }

    /// Admits a generation continuing after `prefix`. Nothing is produced until stepped.
    pub fn open(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        params: &GenParams,
    ) -> Result<GenId, EngineError> {
        if params.max_new_tokens == 0 {
            return Err(EngineError::InvalidParams {
                reason: "max_new_tokens must be at least 1".into(),
            });
        }
        if let Some(t) = input
            .iter()
            .chain(prefix)
            .chain(params.stop_token.as_ref())
            .find(|t| t.0 >= self.config.vocab_size)
        {
            return Err(EngineError::InvalidParams {
                reason: format!("token {t} outside vocabulary of {}", self.config.vocab_size),
            });
        }
        if prefix.len() >= params.max_new_tokens {
            return Err(EngineError::BudgetExhausted {
                prefix_len: prefix.len(),
                max_new_tokens: params.max_new_tokens,
            });
        }
        let mut inner = self.inner.lock();
        if inner.phase == Phase::Switching {
            return Err(self.wait_signal(&inner));
        }
        let id = GenId(inner.next_gen);
        inner.next_gen += 1;
        let ctx = prefix
            .iter()
            .fold(context_hash(input), |s, &t| extend_context(s, t));
        let admitted_version = inner.version;
        inner.in_flight.insert(
            id,
            InFlight {
                input: input.to_vec(),
                prefix: prefix.to_vec(),
                params: params.clone(),
                output: Vec::new(),
                versions: Vec::new(),
                ctx,
                interrupted: false,
                admitted_version,
            },
        );
        Ok(id)
    }

    /// Version a generation was admitted under.
    pub fn admitted_version(&self, id: GenId) -> Option<ModelVersion> {
        self.inner
            .lock()
            .in_flight
            .get(&id)
            .map(|g| g.admitted_version)
    }

    /// Produces the next token of `id`, or closes it when interrupted.
    pub fn step(&self, id: GenId) -> Result<Step, EngineError> {
        let (step, tick) = {
            let mut inner = self.inner.lock();
            let switching = inner.phase == Phase::Switching;
            let version = inner.version;
            let vocab = self.config.vocab_size;
            let g = inner
                .in_flight
                .get_mut(&id)
                .ok_or(EngineError::UnknownGeneration(id))?;
            if g.interrupted || switching {
                let result = g.result(false);
                self.close(&mut inner, id, false);
                return Ok(Step::Done(result));
            }
            let token = next_token(g.ctx, g.params.seed, version, vocab);
            g.ctx = extend_context(g.ctx, token);
            g.output.push(token);
            g.versions.push(version);
            let produced = g.output.len();
            let done = g.prefix.len() + produced >= g.params.max_new_tokens
                || g.params.stop_token == Some(token);
            let step = if done {
                let result = g.result(true);
                self.close(&mut inner, id, true);
                Step::Done(result)
            } else {
                Step::Token { token, version }
            };
            inner.clock += 1;
            let tick = StepTick {
                clock: inner.clock,
                gen: id,
                produced,
                version,
            };
            (step, tick)
        };
        let hook = self.hook.read().clone();
        if let Some(hook) = hook {
            hook(tick);
        }
        Ok(step)
    }

    fn close(&self, inner: &mut Inner, id: GenId, finished: bool) {
        if let Some(g) = inner.in_flight.remove(&id) {
            if self.config.record_log {
                inner.log.push(OracleRecord {
                    gen: id,
                    seed: g.params.seed,
                    input: g.input,
                    prefix: g.prefix,
                    output: g.output,
                    versions: g.versions,
                    finished,
                });
            }
        }
    }

    /// Steps `id` until it finishes or is interrupted.
    pub fn run(&self, id: GenId) -> Result<GenerationResult, EngineError> {
        loop {
            if let Step::Done(result) = self.step(id)? {
                return Ok(result);
            }
        }
    }

    pub fn generate(
        &self,
        input: &[TokenId],
        params: &GenParams,
    ) -> Result<GenerationResult, EngineError> {
        self.resume_from(&[], input, params)
    }

    /// Continues a generation after `prefix` under the current weights.
    pub fn resume_from(
        &self,
        prefix: &[TokenId],
        input: &[TokenId],
        params: &GenParams,
    ) -> Result<GenerationResult, EngineError> {
        let id = self.open(input, prefix, params)?;
        self.run(id)
    }

    /// Stops every in-flight generation; owners observe `finished = false` on their next step.
    pub fn interrupt(&self) -> Vec<InterruptedGeneration> {
        let mut inner = self.inner.lock();
        let ids: Vec<GenId> = inner.in_flight.keys().copied().collect();
        Self::mark_interrupted(&mut inner, &ids)
    }

    pub fn interrupt_ids(&self, ids: &[GenId]) -> Vec<InterruptedGeneration> {
        let mut inner = self.inner.lock();
        Self::mark_interrupted(&mut inner, ids)
    }

    fn mark_interrupted(inner: &mut Inner, ids: &[GenId]) -> Vec<InterruptedGeneration> {
        let mut out = Vec::new();
        for id in ids {
            if let Some(g) = inner.in_flight.get_mut(id) {
                if !g.interrupted {
                    g.interrupted = true;
                    out.push(InterruptedGeneration {
                        gen: *id,
                        result: g.result(false),
                    });
                }
            }
        }
        out
    }

    /// Enters the switching phase. In-flight generations are interrupted.
    pub fn begin_switch(&self) -> Result<EngineState, EngineError> {
        let mut inner = self.inner.lock();
        if inner.phase != Phase::Serving {
            return Err(EngineError::IllegalPhase {
                expected: Phase::Serving,
                actual: inner.phase,
            });
        }
        inner.phase = Phase::Switching;
        inner.switch_id += 1;
        let ids: Vec<GenId> = inner.in_flight.keys().copied().collect();
        Self::mark_interrupted(&mut inner, &ids);
        Ok(Self::snapshot(&inner))
    }

    pub fn complete_switch(&self, new_version: ModelVersion) -> Result<EngineState, EngineError> {
        let mut inner = self.inner.lock();
        if inner.phase != Phase::Switching {
            return Err(EngineError::IllegalPhase {
                expected: Phase::Switching,
                actual: inner.phase,
            });
        }
        if new_version <= inner.version {
            return Err(EngineError::VersionRegression {
                current: inner.version,
                requested: new_version,
            });
        }
        inner.version = new_version;
        inner.phase = Phase::Serving;
        self.serving.notify_all();
        Ok(Self::snapshot(&inner))
    }

    fn snapshot(inner: &Inner) -> EngineState {
        EngineState {
            phase: inner.phase,
            current_version: inner.version,
            switch_id: inner.switch_id,
            in_flight: inner.in_flight.values().filter(|g| !g.interrupted).count(),
            clock: inner.clock,
        }
    }

    fn wait_signal(&self, inner: &Inner) -> EngineError {
        EngineError::Wait {
            switch_id: inner.switch_id,
            retry_after_ms: self.config.retry_after_ms,
        }
    }

    /// Blocks until the engine is serving. Returns false on timeout.
    pub fn wait_until_serving(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        while inner.phase != Phase::Serving {
            if self.serving.wait_until(&mut inner, deadline).timed_out() {
                return inner.phase == Phase::Serving;
            }
        }
        true
    }

    pub fn oracle_log(&self) -> Vec<OracleRecord> {
        self.inner.lock().log.clone()
    }

    pub fn clear_log(&self) {
        self.inner.lock().log.clear();
    }
}
