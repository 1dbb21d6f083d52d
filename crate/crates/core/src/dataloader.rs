//! Streaming task dispatcher. Hands out tasks as rollout slots free up rather
//! than in fixed batches.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Dispatched,
    Complete,
    Requeued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub prompt_tokens: Vec<u32>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl TaskRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("task record serializes")
    }

    /// `meta.turns`, defaulting to one.
    pub fn turns(&self) -> usize {
        self.meta
            .get("turns")
            .and_then(|v| v.as_u64())
            .map(|n| n.max(1) as usize)
            .unwrap_or(1)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate task id {task_id}")]
    Duplicate { line: usize, task_id: TaskId },
    #[error("read failed: {0}")]
    Io(#[from] std::io::Error),
}

impl LoadError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LoadError::Parse { line, .. } | LoadError::Duplicate { line, .. } => Some(*line),
            LoadError::Io(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum DataError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {task} is {actual:?}, expected dispatched")]
    IllegalState { task: TaskId, actual: TaskStatus },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderStats {
    pub pending: usize,
    pub requeued: usize,
    pub dispatched: usize,
    pub complete: usize,
}

#[derive(Default)]
struct Inner {
    records: BTreeMap<TaskId, (TaskRecord, TaskStatus)>,
    fresh: VecDeque<TaskId>,
    retry: VecDeque<TaskId>,
}

#[derive(Default)]
pub struct StreamingDataloader {
    inner: Mutex<Inner>,
}

impl StreamingDataloader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses every line before enqueueing anything; a bad line aborts the load.
    pub fn load<R: BufRead>(&self, reader: R) -> Result<usize, LoadError> {
        let mut parsed = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TaskRecord = serde_json::from_str(&line)
                .map_err(|source| LoadError::Parse { line: i + 1, source })?;
            parsed.push((i + 1, rec));
        }
        let mut inner = self.inner.lock();
        let mut seen = std::collections::BTreeSet::new();
        for (line, rec) in &parsed {
            if inner.records.contains_key(&rec.task_id) || !seen.insert(rec.task_id) {
                return Err(LoadError::Duplicate {
                    line: *line,
                    task_id: rec.task_id,
                });
            }
        }
        let n = parsed.len();
        for (_, rec) in parsed {
            inner.fresh.push_back(rec.task_id);
            inner.records.insert(rec.task_id, (rec, TaskStatus::Pending));
        }
        Ok(n)
    }

    pub fn load_str(&self, text: &str) -> Result<usize, LoadError> {
        self.load(text.as_bytes())
    }

    pub fn extend(&self, records: impl IntoIterator<Item = TaskRecord>) -> Result<usize, LoadError> {
        let text: String = records.into_iter().map(|r| r.to_line() + "\n").collect();
        self.load_str(&text)
    }

    /// Up to `capacity` tasks, requeued ones first, each in arrival order.
    pub fn next(&self, capacity: usize) -> Vec<TaskRecord> {
        let mut inner = self.inner.lock();
        let mut out = Vec::with_capacity(capacity);
        while out.len() < capacity {
            let Some(id) = inner.retry.pop_front().or_else(|| inner.fresh.pop_front()) else {
                break;
            };
            let entry = inner.records.get_mut(&id).expect("queued task is recorded");
            entry.1 = TaskStatus::Dispatched;
            out.push(entry.0.clone());
        }
        out
    }

    fn transition(&self, id: TaskId, to: TaskStatus) -> Result<(), DataError> {
        let mut inner = self.inner.lock();
        let entry = inner
            .records
            .get_mut(&id)
            .ok_or(DataError::UnknownTask(id))?;
        if entry.1 != TaskStatus::Dispatched {
            return Err(DataError::IllegalState {
                task: id,
                actual: entry.1,
            });
        }
        entry.1 = to;
        if to == TaskStatus::Requeued {
            inner.retry.push_back(id);
        }
        Ok(())
    }

    pub fn complete(&self, id: TaskId) -> Result<(), DataError> {
        self.transition(id, TaskStatus::Complete)
    }

    pub fn requeue(&self, id: TaskId) -> Result<(), DataError> {
        self.transition(id, TaskStatus::Requeued)
    }

    pub fn status(&self, id: TaskId) -> Option<TaskStatus> {
        self.inner.lock().records.get(&id).map(|e| e.1)
    }

    pub fn pending(&self) -> usize {
        let inner = self.inner.lock();
        inner.fresh.len() + inner.retry.len()
    }

    pub fn in_flight(&self) -> usize {
        self.stats().dispatched
    }

    pub fn stats(&self) -> LoaderStats {
        let inner = self.inner.lock();
        let mut s = LoaderStats::default();
        for (_, st) in inner.records.values() {
            match st {
                TaskStatus::Pending => s.pending += 1,
                TaskStatus::Requeued => s.requeued += 1,
                TaskStatus::Dispatched => s.dispatched += 1,
                TaskStatus::Complete => s.complete += 1,
            }
        }
        s
    }

    pub fn is_drained(&self) -> bool {
        let s = self.stats();
        s.pending + s.requeued + s.dispatched == 0
    }
}
