//! Spatiotemporal multiplexing, driven by the real [`MultiplexController`].
//!
//! Every rollout-capable node rolls out until `batch_size` completed samples
//! are waiting. The controller then moves the train-capable nodes to training,
//! pausing their in-flight samples; the other nodes keep rolling out. When
//! training ends every rollout-capable node returns to rollout and paused
//! samples resume first.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use super::metrics::Accountant;
use super::{NodeSpec, SampleRecord, SimError, SimResult, Strategy, TraceEvent, TrainRecord, Workload};
use crate::scheduler::{CapabilityTag, MultiplexController, Scheduler};
use crate::types::ResourceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    SampleDone { node: usize, sample: usize, token: u64 },
    TrainStart { batch: usize },
    TrainDone { batch: usize },
    TransitionDone,
}

#[derive(Debug, Clone, Copy)]
struct Run {
    sample: usize,
    end: u64,
    token: u64,
}

struct Training {
    batch: usize,
    nodes: Vec<usize>,
    active: bool,
    samples: Vec<usize>,
}

pub(super) fn run(
    cluster: &[NodeSpec],
    w: &Workload,
    durations: &[u64],
) -> Result<SimResult, SimError> {
    let b = w.batch_size;
    let steps = w.num_steps;
    let total = durations.len();
    let cost = w.transition_cost_us;
    let t_train = w.train_duration_us;

    let ids: Vec<ResourceId> = cluster.iter().map(|n| n.id.clone()).collect();
    let index: BTreeMap<ResourceId, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    let train_capable: Vec<bool> = cluster.iter().map(|n| n.has(CapabilityTag::Train)).collect();
    let rollout_capable: Vec<bool> = cluster.iter().map(|n| n.has(CapabilityTag::Rollout)).collect();
    let mut acct = Accountant::new(ids.clone(), train_capable.clone(), rollout_capable.clone());

    let mut ctl = MultiplexController::new(Scheduler::with_resources(
        cluster.iter().map(NodeSpec::descriptor),
    )?);

    let mut samples: Vec<SampleRecord> = durations
        .iter()
        .enumerate()
        .map(|(i, &d)| SampleRecord {
            sample: i,
            duration_us: d,
            ..Default::default()
        })
        .collect();
    let mut remaining: Vec<u64> = durations.to_vec();
    let mut started = vec![false; total];
    let mut running: Vec<Option<Run>> = vec![None; cluster.len()];
    let mut transition_until = vec![0u64; cluster.len()];
    let mut paused: VecDeque<usize> = VecDeque::new();
    let mut completed: VecDeque<usize> = VecDeque::new();
    let mut training: Option<Training> = None;
    let mut next = 0usize;
    let mut version = 0u64;
    let mut batches_started = 0usize;
    let mut batches_done = 0usize;
    let mut now = 0u64;
    let mut seq = 0u64;
    let mut token = 0u64;
    let mut heap: BinaryHeap<Reverse<(u64, u64, Ev)>> = BinaryHeap::new();
    let mut trace = Vec::new();
    let mut trains = Vec::new();

    let tags = |ctl: &MultiplexController| -> Vec<Option<CapabilityTag>> {
        ids.iter().map(|id| ctl.active_tag(id)).collect()
    };
    let log_retags = |trace: &mut Vec<TraceEvent>,
                      before: &[Option<CapabilityTag>],
                      after: &[Option<CapabilityTag>],
                      t: u64| {
        for (i, (a, b)) in before.iter().zip(after).enumerate() {
            if a != b {
                trace.push(TraceEvent::Retag {
                    t,
                    resource: ids[i].clone(),
                    from: *a,
                    to: *b,
                });
            }
        }
    };

    let before = tags(&ctl);
    ctl.start(0);
    log_retags(&mut trace, &before, &tags(&ctl), 0);

    while batches_done < steps {
        // Put idle rollout nodes to work: paused samples first.
        for node in 0..cluster.len() {
            if running[node].is_some()
                || transition_until[node] > now
                || ctl.active_tag(&ids[node]) != Some(CapabilityTag::Rollout)
            {
                continue;
            }
            let pick = match paused.pop_front() {
                Some(i) => Some(i),
                None if next < total => {
                    next += 1;
                    Some(next - 1)
                }
                None => None,
            };
            let Some(i) = pick else { break };
            let resumed = started[i];
            if !resumed {
                started[i] = true;
                samples[i].started_at = now;
                samples[i].start_version = version;
            }
            token += 1;
            let end = now + remaining[i];
            running[node] = Some(Run { sample: i, end, token });
            trace.push(TraceEvent::SampleStart {
                t: now,
                resource: ids[node].clone(),
                sample: i,
                resumed,
            });
            seq += 1;
            heap.push(Reverse((end, seq, Ev::SampleDone { node, sample: i, token })));
        }

        let Some(&Reverse((t, _, _))) = heap.peek() else { break };
        {
            let rollout_left = !paused.is_empty() || next < total;
            let train_left = batches_done < steps && t_train > 0;
            let in_training: Vec<bool> = (0..cluster.len())
                .map(|i| {
                    training
                        .as_ref()
                        .is_some_and(|tr| tr.active && tr.nodes.contains(&i))
                })
                .collect();
            acct.advance(t, |i| {
                let busy = running[i].is_some() || in_training[i];
                let relevant = transition_until[i] > now
                    || (rollout_capable[i] && rollout_left)
                    || (train_capable[i] && train_left);
                (busy, relevant)
            });
        }
        now = t;

        while let Some(&Reverse((t2, _, ev))) = heap.peek() {
            if t2 != now {
                break;
            }
            heap.pop();
            match ev {
                Ev::SampleDone { node, sample, token } => {
                    if running[node].map(|r| r.token) != Some(token) {
                        continue;
                    }
                    running[node] = None;
                    remaining[sample] = 0;
                    samples[sample].completed_at = now;
                    completed.push_back(sample);
                    trace.push(TraceEvent::SampleStop {
                        t: now,
                        resource: ids[node].clone(),
                        sample,
                    });
                }
                Ev::TrainStart { batch } => {
                    let tr = training.as_mut().expect("training scheduled");
                    debug_assert_eq!(tr.batch, batch);
                    tr.active = true;
                    let resources: Vec<ResourceId> =
                        tr.nodes.iter().map(|&i| ids[i].clone()).collect();
                    trace.push(TraceEvent::TrainStart {
                        t: now,
                        batch,
                        micro: 0,
                        resources: resources.clone(),
                        samples: tr.samples.clone(),
                    });
                    trains.push(TrainRecord {
                        batch,
                        micro: 0,
                        start: now,
                        end: now + t_train,
                        resources,
                        samples: tr.samples.clone(),
                    });
                    seq += 1;
                    heap.push(Reverse((now + t_train, seq, Ev::TrainDone { batch })));
                }
                Ev::TrainDone { batch } => {
                    training = None;
                    version = batch as u64 + 1;
                    batches_done += 1;
                    trace.push(TraceEvent::TrainStop {
                        t: now,
                        batch,
                        micro: 0,
                    });
                    let before = tags(&ctl);
                    let back = ctl.on_train_complete(now);
                    log_retags(&mut trace, &before, &tags(&ctl), now);
                    if cost > 0 {
                        for id in back {
                            transition_until[index[&id]] = now + cost;
                        }
                        seq += 1;
                        heap.push(Reverse((now + cost, seq, Ev::TransitionDone)));
                    }
                }
                Ev::TransitionDone => {}
            }
        }

        if training.is_none() && completed.len() >= b && batches_started < steps {
            let k = batches_started;
            batches_started += 1;
            let before = tags(&ctl);
            let assignment = ctl.on_threshold(now)?;
            log_retags(&mut trace, &before, &tags(&ctl), now);
            for id in &assignment.preempted {
                let node = index[id];
                if let Some(run) = running[node].take() {
                    remaining[run.sample] = run.end - now;
                    samples[run.sample].preemptions += 1;
                    paused.push_back(run.sample);
                    trace.push(TraceEvent::SamplePreempt {
                        t: now,
                        resource: id.clone(),
                        sample: run.sample,
                        remaining_us: run.end - now,
                    });
                }
            }
            let batch: Vec<usize> = completed.drain(..b).collect();
            for &i in &batch {
                samples[i].trained_in = k;
                samples[i].lag = k as u64 - samples[i].start_version;
            }
            let nodes: Vec<usize> = assignment.resources.iter().map(|id| index[id]).collect();
            for &n in &nodes {
                transition_until[n] = now + cost;
            }
            training = Some(Training {
                batch: k,
                nodes,
                active: false,
                samples: batch,
            });
            seq += 1;
            heap.push(Reverse((now + cost, seq, Ev::TrainStart { batch: k })));
        }
    }

    let metrics = acct.finish(Strategy::Spatiotemporal, &samples);
    Ok(SimResult {
        metrics,
        trace,
        samples,
        trains,
        phases: ctl.trace().to_vec(),
    })
}
