//! The three disaggregated baselines as one gated engine.
//!
//! A sample of batch `b` may start once the published version is at least
//! `b - staleness`. Each batch trains as `micro` sequential chunks; chunk `q`
//! becomes ready once its share of the batch has completed. `(1, 0)` is the
//! serial pipeline, `(m, 0)` the micro-batched one and `(m, s)` off-policy fill.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::metrics::Accountant;
use super::{NodeSpec, SampleRecord, SimResult, Strategy, TraceEvent, TrainRecord, Workload};
use crate::scheduler::CapabilityTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    SampleDone { node: usize, sample: usize },
    MicroDone { batch: usize, micro: usize },
}

pub(super) fn run(
    strategy: Strategy,
    cluster: &[NodeSpec],
    w: &Workload,
    durations: &[u64],
    micro: usize,
    staleness: u64,
) -> SimResult {
    let b = w.batch_size;
    let m = micro.min(b);
    let t_train = w.train_duration_us;
    let total = durations.len();
    let steps = w.num_steps;

    let ids: Vec<_> = cluster.iter().map(|n| n.id.clone()).collect();
    let is_train: Vec<bool> = cluster.iter().map(|n| n.has(CapabilityTag::Train)).collect();
    let is_rollout: Vec<bool> = is_train.iter().map(|t| !t).collect();
    let train_nodes: Vec<usize> = (0..cluster.len()).filter(|&i| is_train[i]).collect();
    let train_ids: Vec<_> = train_nodes.iter().map(|&i| ids[i].clone()).collect();
    let mut acct = Accountant::new(ids.clone(), is_train.clone(), is_rollout.clone());

    let micro_end = |q: usize| ((q + 1) * b).div_ceil(m);
    let micro_start = |q: usize| if q == 0 { 0 } else { micro_end(q - 1) };
    let micro_dur = |q: usize| t_train / m as u64 + if q == m - 1 { t_train % m as u64 } else { 0 };

    let mut samples: Vec<SampleRecord> = durations
        .iter()
        .enumerate()
        .map(|(i, &d)| SampleRecord {
            sample: i,
            duration_us: d,
            ..Default::default()
        })
        .collect();
    let mut running: Vec<Option<usize>> = vec![None; cluster.len()];
    let mut trainer: Option<(usize, usize)> = None;
    let mut next_micro = (0usize, 0usize);
    let mut done_order: Vec<Vec<usize>> = vec![Vec::new(); steps];
    let mut version: u64 = 0;
    let mut next = 0usize;
    let mut now = 0u64;
    let mut seq = 0u64;
    let mut heap: BinaryHeap<Reverse<(u64, u64, Ev)>> = BinaryHeap::new();
    let mut trace = Vec::new();
    let mut trains = Vec::new();

    let gate_open = |next: usize, version: u64| (next / b) as u64 <= version + staleness;

    loop {
        // Fill idle rollout nodes in order.
        for node in 0..cluster.len() {
            if !is_rollout[node] || running[node].is_some() {
                continue;
            }
            if next >= total || !gate_open(next, version) {
                break;
            }
            let i = next;
            next += 1;
            samples[i].started_at = now;
            samples[i].start_version = version;
            running[node] = Some(i);
            trace.push(TraceEvent::SampleStart {
                t: now,
                resource: ids[node].clone(),
                sample: i,
                resumed: false,
            });
            seq += 1;
            heap.push(Reverse((now + durations[i], seq, Ev::SampleDone { node, sample: i })));
        }
        if trainer.is_none() && (version as usize) < steps {
            let (j, q) = next_micro;
            if done_order[j].len() >= micro_end(q) {
                let chunk: Vec<usize> = done_order[j][micro_start(q)..micro_end(q)].to_vec();
                for &i in &chunk {
                    samples[i].trained_in = j;
                    samples[i].lag = j as u64 - samples[i].start_version;
                }
                let end = now + micro_dur(q);
                trace.push(TraceEvent::TrainStart {
                    t: now,
                    batch: j,
                    micro: q,
                    resources: train_ids.clone(),
                    samples: chunk.clone(),
                });
                trains.push(TrainRecord {
                    batch: j,
                    micro: q,
                    start: now,
                    end,
                    resources: train_ids.clone(),
                    samples: chunk,
                });
                trainer = Some((j, q));
                seq += 1;
                heap.push(Reverse((end, seq, Ev::MicroDone { batch: j, micro: q })));
            }
        }

        let Some(&Reverse((t, _, _))) = heap.peek() else { break };
        {
            let busy_train = trainer.is_some();
            let waiting_on_training = next < total && {
                if gate_open(next, version) {
                    true
                } else {
                    let g = (next / b) as u64 - staleness - 1;
                    done_order[g as usize].len() == b
                }
            };
            let train_left = (version as usize) < steps && t_train > 0;
            acct.advance(t, |i| {
                if is_train[i] {
                    (busy_train, train_left)
                } else {
                    (running[i].is_some(), waiting_on_training)
                }
            });
        }
        now = t;
        while let Some(&Reverse((t2, _, ev))) = heap.peek() {
            if t2 != now {
                break;
            }
            heap.pop();
            match ev {
                Ev::SampleDone { node, sample } => {
                    running[node] = None;
                    samples[sample].completed_at = now;
                    done_order[sample / b].push(sample);
                    trace.push(TraceEvent::SampleStop {
                        t: now,
                        resource: ids[node].clone(),
                        sample,
                    });
                }
                Ev::MicroDone { batch, micro } => {
                    trainer = None;
                    trace.push(TraceEvent::TrainStop {
                        t: now,
                        batch,
                        micro,
                    });
                    if micro + 1 == m {
                        version = batch as u64 + 1;
                        next_micro = (batch + 1, 0);
                    } else {
                        next_micro = (batch, micro + 1);
                    }
                }
            }
        }
        if version as usize >= steps {
            break;
        }
    }

    let metrics = acct.finish(strategy, &samples);
    SimResult {
        metrics,
        trace,
        samples,
        trains,
        phases: Vec::new(),
    }
}
