//! Discrete-event simulator for rollout/train pipelines.
//!
//! Time is virtual, in integer microseconds. Per-sample rollout durations are
//! drawn once per seed in sample order, so every strategy sees the same work.

mod baseline;
mod metrics;
mod spatio;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{CapabilityTag, PhaseRecord, ResourceDescriptor, SchedError};
use crate::types::ResourceId;

pub use metrics::{ResourceMetrics, SimMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    MicroBatch,
    OffPolicyFill,
    Spatiotemporal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Naive,
        Strategy::MicroBatch,
        Strategy::OffPolicyFill,
        Strategy::Spatiotemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::MicroBatch => "micro_batch",
            Strategy::OffPolicyFill => "off_policy_fill",
            Strategy::Spatiotemporal => "spatiotemporal",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

fn default_micro_batches() -> usize {
    4
}

fn default_staleness() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub num_steps: usize,
    pub batch_size: usize,
    /// Per-sample rollout time is uniform in `mean ± jitter`.
    pub rollout_mean_us: u64,
    #[serde(default)]
    pub rollout_jitter_us: u64,
    pub train_duration_us: u64,
    #[serde(default = "default_staleness")]
    pub staleness_limit: u64,
    #[serde(default = "default_micro_batches")]
    pub micro_batches: usize,
    /// Charged to every resource that changes role.
    #[serde(default)]
    pub transition_cost_us: u64,
}

impl Workload {
    pub fn canonical() -> Self {
        Workload {
            num_steps: 50,
            batch_size: 32,
            rollout_mean_us: 500_000,
            rollout_jitter_us: 50_000,
            train_duration_us: 1_000_000,
            staleness_limit: 1,
            micro_batches: 4,
            transition_cost_us: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &'static str, reason: &str| {
            Err(SimError::InvalidWorkload {
                field,
                reason: reason.to_string(),
            })
        };
        if self.num_steps == 0 {
            return bad("num_steps", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.rollout_mean_us == 0 {
            return bad("rollout_mean_us", "must be positive");
        }
        if self.rollout_jitter_us >= self.rollout_mean_us {
            return bad("rollout_jitter_us", "must be smaller than rollout_mean_us");
        }
        if self.micro_batches == 0 {
            return bad("micro_batches", "must be at least 1");
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_steps * self.batch_size
    }

    pub fn durations(&self, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = self.rollout_mean_us - self.rollout_jitter_us;
        let hi = self.rollout_mean_us + self.rollout_jitter_us;
        (0..self.total_samples())
            .map(|_| rng.random_range(lo..=hi))
            .collect()
    }
}

/// Cluster node as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: ResourceId,
    pub tags: Vec<CapabilityTag>,
    pub peak_flops: f64,
    pub hbm_bandwidth: f64,
}

impl NodeSpec {
    pub fn descriptor(&self) -> ResourceDescriptor {
        ResourceDescriptor::new(
            self.id.clone(),
            self.tags.iter().copied(),
            self.peak_flops,
            self.hbm_bandwidth,
        )
    }

    fn has(&self, tag: CapabilityTag) -> bool {
        self.tags.contains(&tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cluster: Vec<NodeSpec>,
    pub workload: Workload,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
}

fn default_strategy() -> Strategy {
    Strategy::Spatiotemporal
}

/// `dual` nodes tagged {rollout, train} plus `rollout_only` nodes tagged {rollout}.
pub fn mixed_cluster(dual: usize, rollout_only: usize) -> Vec<NodeSpec> {
    let mut nodes = Vec::new();
    for i in 0..dual {
        nodes.push(NodeSpec {
            id: ResourceId::new(format!("dual-{i}")),
            tags: vec![CapabilityTag::Rollout, CapabilityTag::Train],
            peak_flops: 989e12,
            hbm_bandwidth: 3.35e12,
        });
    }
    for i in 0..rollout_only {
        nodes.push(NodeSpec {
            id: ResourceId::new(format!("rollout-{i}")),
            tags: vec![CapabilityTag::Rollout],
            peak_flops: 400e12,
            hbm_bandwidth: 3.35e12,
        });
    }
    nodes
}

/// Single-tag split of a cluster: train-capable nodes train, the rest roll out.
pub fn disaggregate(cluster: &[NodeSpec]) -> Vec<NodeSpec> {
    cluster
        .iter()
        .map(|n| {
            let tag = if n.has(CapabilityTag::Train) {
                CapabilityTag::Train
            } else {
                CapabilityTag::Rollout
            };
            NodeSpec {
                tags: vec![tag],
                ..n.clone()
            }
        })
        .collect()
}

impl Scenario {
    pub fn canonical(seed: u64) -> Self {
        Scenario {
            cluster: mixed_cluster(4, 4),
            workload: Workload::canonical(),
            strategy: Strategy::Spatiotemporal,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("strategy {strategy}: incompatible tagging: {reason}")]
    IncompatibleTagging { strategy: Strategy, reason: String },
    #[error("workload.{field}: {reason}")]
    InvalidWorkload { field: &'static str, reason: String },
    #[error(transparent)]
    Sched(#[from] SchedError),
}

/// One entry of the simulation trace. Timestamps are virtual microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    SampleStart {
        t: u64,
        resource: ResourceId,
        sample: usize,
        resumed: bool,
    },
    SampleStop {
        t: u64,
        resource: ResourceId,
        sample: usize,
    },
    SamplePreempt {
        t: u64,
        resource: ResourceId,
        sample: usize,
        remaining_us: u64,
    },
    TrainStart {
        t: u64,
        batch: usize,
        micro: usize,
        resources: Vec<ResourceId>,
        samples: Vec<usize>,
    },
    TrainStop {
        t: u64,
        batch: usize,
        micro: usize,
    },
    Retag {
        t: u64,
        resource: ResourceId,
        from: Option<CapabilityTag>,
        to: Option<CapabilityTag>,
    },
}

impl TraceEvent {
    pub fn time(&self) -> u64 {
        match self {
            TraceEvent::SampleStart { t, .. }
            | TraceEvent::SampleStop { t, .. }
            | TraceEvent::SamplePreempt { t, .. }
            | TraceEvent::TrainStart { t, .. }
            | TraceEvent::TrainStop { t, .. }
            | TraceEvent::Retag { t, .. } => *t,
        }
    }
}

/// Per-sample outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub duration_us: u64,
    pub started_at: u64,
    pub completed_at: u64,
    /// Policy version published when the sample first started.
    pub start_version: u64,
    pub trained_in: usize,
    pub lag: u64,
    pub preemptions: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub batch: usize,
    pub micro: usize,
    pub start: u64,
    pub end: u64,
    pub resources: Vec<ResourceId>,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub metrics: SimMetrics,
    pub trace: Vec<TraceEvent>,
    pub samples: Vec<SampleRecord>,
    pub trains: Vec<TrainRecord>,
    /// Controller phase trace; empty for baselines.
    pub phases: Vec<PhaseRecord>,
}

impl SimResult {
    pub fn trace_lines(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace serializes") + "\n")
            .collect()
    }
}

fn check_baseline_tags(strategy: Strategy, cluster: &[NodeSpec]) -> Result<(), SimError> {
    let err = |reason: String| Err(SimError::IncompatibleTagging { strategy, reason });
    for n in cluster {
        if n.tags.len() != 1 {
            return err(format!("node {} must carry exactly one tag", n.id));
        }
        if !matches!(n.tags[0], CapabilityTag::Rollout | CapabilityTag::Train) {
            return err(format!("node {} has unsupported tag {}", n.id, n.tags[0]));
        }
    }
    if !cluster.iter().any(|n| n.has(CapabilityTag::Train)) {
        return err("no train node".into());
    }
    if !cluster.iter().any(|n| n.has(CapabilityTag::Rollout)) {
        return err("no rollout node".into());
    }
    Ok(())
}

pub fn simulate(
    strategy: Strategy,
    cluster: &[NodeSpec],
    workload: &Workload,
    seed: u64,
) -> Result<SimResult, SimError> {
    if cluster.is_empty() {
        return Err(SimError::EmptyCluster);
    }
    workload.validate()?;
    let durations = workload.durations(seed);
    match strategy {
        Strategy::Naive => {
            check_baseline_tags(strategy, cluster)?;
            Ok(baseline::run(strategy, cluster, workload, &durations, 1, 0))
        }
        Strategy::MicroBatch => {
            check_baseline_tags(strategy, cluster)?;
            Ok(baseline::run(
                strategy,
                cluster,
                workload,
                &durations,
                workload.micro_batches,
                0,
            ))
        }
        Strategy::OffPolicyFill => {
            check_baseline_tags(strategy, cluster)?;
            Ok(baseline::run(
                strategy,
                cluster,
                workload,
                &durations,
                workload.micro_batches,
                workload.staleness_limit,
            ))
        }
        Strategy::Spatiotemporal => {
            let err = |reason: &str| SimError::IncompatibleTagging {
                strategy,
                reason: reason.to_string(),
            };
            if !cluster.iter().any(|n| n.has(CapabilityTag::Train)) {
                return Err(err("no train-capable node"));
            }
            if !cluster.iter().any(|n| n.has(CapabilityTag::Rollout)) {
                return Err(err("no rollout-capable node"));
            }
            spatio::run(cluster, workload, &durations)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub bubble_fraction: f64,
    pub makespan_us: u64,
    pub mean_staleness: f64,
    pub train_node_bubble: f64,
    pub rollout_node_bubble: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    /// Sorted by bubble fraction, worst first.
    pub rows: Vec<CompareRow>,
    /// Spatiotemporal bubble is at most every baseline's.
    pub dominance: bool,
    /// Spatiotemporal bubble is strictly below every baseline's.
    pub strict_dominance: bool,
}

impl CompareReport {
    pub fn row(&self, s: Strategy) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "seed {}\n{:<16} {:>8} {:>12} {:>10} {:>8} {:>8}\n",
            self.seed, "strategy", "bubble", "makespan_s", "staleness", "train", "rollout"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>12.3} {:>10.3} {:>8.4} {:>8.4}\n",
                r.strategy.name(),
                r.bubble_fraction,
                r.makespan_us as f64 / 1e6,
                r.mean_staleness,
                r.train_node_bubble,
                r.rollout_node_bubble
            ));
        }
        out
    }
}

/// Runs every strategy on the same inputs. Baselines get the single-tag view
/// of the cluster; the spatiotemporal run uses it as given.
pub fn compare(
    strategies: &[Strategy],
    cluster: &[NodeSpec],
    workload: &Workload,
    seed: u64,
) -> Result<(CompareReport, BTreeMap<Strategy, SimResult>), SimError> {
    let split = disaggregate(cluster);
    let mut results = BTreeMap::new();
    for &s in strategies {
        let nodes = if s == Strategy::Spatiotemporal {
            cluster
        } else {
            &split[..]
        };
        results.insert(s, simulate(s, nodes, workload, seed)?);
    }
    let mut rows: Vec<CompareRow> = results
        .iter()
        .map(|(s, r)| CompareRow {
            strategy: *s,
            bubble_fraction: r.metrics.bubble_fraction,
            makespan_us: r.metrics.makespan_us,
            mean_staleness: r.metrics.mean_staleness,
            train_node_bubble: r.metrics.train_node_bubble,
            rollout_node_bubble: r.metrics.rollout_node_bubble,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.bubble_fraction
            .total_cmp(&a.bubble_fraction)
            .then(a.strategy.cmp(&b.strategy))
    });
    let (dominance, strict_dominance) = match results.get(&Strategy::Spatiotemporal) {
        Some(st) => {
            let b = st.metrics.bubble_fraction;
            let others = results
                .iter()
                .filter(|(s, _)| **s != Strategy::Spatiotemporal);
            let mut weak = true;
            let mut strict = true;
            for (_, r) in others {
                weak &= b <= r.metrics.bubble_fraction;
                strict &= b < r.metrics.bubble_fraction;
            }
            (weak, strict)
        }
        None => (true, true),
    };
    Ok((
        CompareReport {
            seed,
            rows,
            dominance,
            strict_dominance,
        },
        results,
    ))
}

#[cfg(test)]
mod tests;
