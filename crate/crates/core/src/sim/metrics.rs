use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SampleRecord, Strategy};
use crate::types::ResourceId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceMetrics {
    pub resource_id: ResourceId,
    pub train_capable: bool,
    pub rollout_capable: bool,
    pub busy_us: u64,
    pub idle_us: u64,
    /// Idle time during which the resource had relevant work.
    pub bubble_us: u64,
    pub bubble_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub strategy: Strategy,
    pub makespan_us: u64,
    /// Total bubble time over total resource time.
    pub bubble_fraction: f64,
    /// Mean bubble fraction over train-capable resources.
    pub train_node_bubble: f64,
    /// Mean bubble fraction over rollout-only resources (or all rollout-capable
    /// ones when none is rollout-only).
    pub rollout_node_bubble: f64,
    pub resources: Vec<ResourceMetrics>,
    /// Version lag of each trained sample, as lag -> count.
    pub staleness: BTreeMap<u64, usize>,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub trained_samples: usize,
}

impl SimMetrics {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Busy/idle/bubble integrator. The caller reports, for each interval between
/// events, which resources were busy and which idle ones had relevant work.
pub(super) struct Accountant {
    ids: Vec<ResourceId>,
    train_capable: Vec<bool>,
    rollout_capable: Vec<bool>,
    busy: Vec<u64>,
    idle: Vec<u64>,
    bubble: Vec<u64>,
    now: u64,
}

impl Accountant {
    pub fn new(ids: Vec<ResourceId>, train_capable: Vec<bool>, rollout_capable: Vec<bool>) -> Self {
        let n = ids.len();
        Accountant {
            ids,
            train_capable,
            rollout_capable,
            busy: vec![0; n],
            idle: vec![0; n],
            bubble: vec![0; n],
            now: 0,
        }
    }

    /// Charges `[self.now, to)` using `state(i) -> (busy, relevant)`.
    pub fn advance(&mut self, to: u64, mut state: impl FnMut(usize) -> (bool, bool)) {
        debug_assert!(to >= self.now);
        let dt = to - self.now;
        if dt > 0 {
            for i in 0..self.ids.len() {
                let (busy, relevant) = state(i);
                if busy {
                    self.busy[i] += dt;
                } else {
                    self.idle[i] += dt;
                    if relevant {
                        self.bubble[i] += dt;
                    }
                }
            }
        }
        self.now = to;
    }

    pub fn finish(self, strategy: Strategy, samples: &[SampleRecord]) -> SimMetrics {
        let makespan = self.now;
        let frac = |x: u64| {
            if makespan == 0 {
                0.0
            } else {
                x as f64 / makespan as f64
            }
        };
        let resources: Vec<ResourceMetrics> = (0..self.ids.len())
            .map(|i| ResourceMetrics {
                resource_id: self.ids[i].clone(),
                train_capable: self.train_capable[i],
                rollout_capable: self.rollout_capable[i],
                busy_us: self.busy[i],
                idle_us: self.idle[i],
                bubble_us: self.bubble[i],
                bubble_fraction: frac(self.bubble[i]),
            })
            .collect();
        let total: u64 = self.bubble.iter().sum();
        let bubble_fraction = if makespan == 0 {
            0.0
        } else {
            total as f64 / (makespan as f64 * self.ids.len() as f64)
        };
        let mean = |sel: &dyn Fn(&ResourceMetrics) -> bool| {
            let v: Vec<f64> = resources
                .iter()
                .filter(|r| sel(r))
                .map(|r| r.bubble_fraction)
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let train_node_bubble = mean(&|r| r.train_capable);
        let rollout_only = resources
            .iter()
            .any(|r| r.rollout_capable && !r.train_capable);
        let rollout_node_bubble = if rollout_only {
            mean(&|r| r.rollout_capable && !r.train_capable)
        } else {
            mean(&|r| r.rollout_capable)
        };
        let mut staleness = BTreeMap::new();
        for s in samples {
            *staleness.entry(s.lag).or_insert(0) += 1;
        }
        let trained = samples.len();
        let mean_staleness = if trained == 0 {
            0.0
        } else {
            samples.iter().map(|s| s.lag as f64).sum::<f64>() / trained as f64
        };
        SimMetrics {
            strategy,
            makespan_us: makespan,
            bubble_fraction,
            train_node_bubble,
            rollout_node_bubble,
            resources,
            max_staleness: samples.iter().map(|s| s.lag).max().unwrap_or(0),
            staleness,
            mean_staleness,
            trained_samples: trained,
        }
    }
}
