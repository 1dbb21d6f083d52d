use super::*;

fn two_node(dual: bool) -> Vec<NodeSpec> {
    let train_tags = if dual {
        vec![CapabilityTag::Rollout, CapabilityTag::Train]
    } else {
        vec![CapabilityTag::Train]
    };
    vec![
        NodeSpec {
            id: "r".into(),
            tags: vec![CapabilityTag::Rollout],
            peak_flops: 1e12,
            hbm_bandwidth: 1e12,
        },
        NodeSpec {
            id: "t".into(),
            tags: train_tags,
            peak_flops: 1e12,
            hbm_bandwidth: 1e12,
        },
    ]
}

fn serial_workload() -> Workload {
    Workload {
        num_steps: 10,
        batch_size: 1,
        rollout_mean_us: 4_000_000,
        rollout_jitter_us: 0,
        train_duration_us: 1_000_000,
        staleness_limit: 1,
        micro_batches: 4,
        transition_cost_us: 0,
    }
}

fn train_metrics(r: &SimResult) -> &ResourceMetrics {
    r.metrics
        .resources
        .iter()
        .find(|m| m.resource_id.as_str() == "t")
        .unwrap()
}

#[test]
fn naive_serial_train_idle_four_fifths() {
    let w = serial_workload();
    let r = simulate(Strategy::Naive, &two_node(false), &w, 0).unwrap();
    // Ten rounds of 4 s rollout followed by 1 s training.
    let makespan = 10 * (4_000_000 + 1_000_000);
    assert_eq!(r.metrics.makespan_us, makespan);
    let t = train_metrics(&r);
    assert_eq!(t.bubble_us, 10 * 4_000_000);
    assert_eq!(t.bubble_fraction, 0.8);
}

#[test]
fn spatiotemporal_serial_is_gap_free() {
    let w = serial_workload();
    let r = simulate(Strategy::Spatiotemporal, &two_node(true), &w, 0).unwrap();
    assert!(r.metrics.bubble_fraction <= 0.02, "{}", r.metrics.bubble_fraction);
}

#[test]
fn off_policy_fill_starves_trainer() {
    let w = serial_workload();
    let off = simulate(Strategy::OffPolicyFill, &two_node(false), &w, 0).unwrap();
    let st = simulate(Strategy::Spatiotemporal, &two_node(true), &w, 0).unwrap();
    assert!(off.metrics.bubble_fraction > st.metrics.bubble_fraction);
    assert!(off.metrics.max_staleness <= w.staleness_limit);
}

#[test]
fn zero_train_duration_has_no_bubble() {
    let mut w = Workload::canonical();
    w.train_duration_us = 0;
    w.num_steps = 5;
    let (report, _) = compare(&Strategy::ALL, &mixed_cluster(4, 4), &w, 3).unwrap();
    for row in &report.rows {
        assert_eq!(row.bubble_fraction, 0.0, "{}", row.strategy);
    }
}

#[test]
fn identical_seeds_identical_reports() {
    let mut w = Workload::canonical();
    w.num_steps = 8;
    let a = compare(&Strategy::ALL, &mixed_cluster(4, 4), &w, 11).unwrap();
    let b = compare(&Strategy::ALL, &mixed_cluster(4, 4), &w, 11).unwrap();
    assert_eq!(a.0, b.0);
    for s in Strategy::ALL {
        assert_eq!(a.1[&s].trace_lines(), b.1[&s].trace_lines());
    }
}

#[test]
fn canonical_ordering() {
    let s = Scenario::canonical(1);
    let (report, _) = compare(&Strategy::ALL, &s.cluster, &s.workload, s.seed).unwrap();
    let order: Vec<Strategy> = report.rows.iter().map(|r| r.strategy).collect();
    assert_eq!(
        order,
        vec![
            Strategy::Naive,
            Strategy::MicroBatch,
            Strategy::OffPolicyFill,
            Strategy::Spatiotemporal
        ]
    );
    assert!(report.strict_dominance);
}

#[test]
fn tagging_is_validated() {
    let w = serial_workload();
    let err = simulate(Strategy::Naive, &two_node(true), &w, 0).unwrap_err();
    assert!(matches!(
        err,
        SimError::IncompatibleTagging {
            strategy: Strategy::Naive,
            ..
        }
    ));
    assert!(err.to_string().contains("naive"));
    let rollout_only = vec![two_node(false)[0].clone()];
    assert!(simulate(Strategy::Spatiotemporal, &rollout_only, &w, 0).is_err());
    assert_eq!(
        simulate(Strategy::Naive, &[], &w, 0).unwrap_err(),
        SimError::EmptyCluster
    );
}

#[test]
fn workload_validation() {
    let mut w = serial_workload();
    w.batch_size = 0;
    assert!(matches!(
        simulate(Strategy::Naive, &two_node(false), &w, 0),
        Err(SimError::InvalidWorkload { field: "batch_size", .. })
    ));
}

fn check_invariants(r: &SimResult, w: &Workload) {
    let m = &r.metrics;
    for res in &m.resources {
        assert_eq!(res.busy_us + res.idle_us, m.makespan_us);
        assert!(res.bubble_us <= res.idle_us);
        assert!((0.0..=1.0).contains(&res.bubble_fraction));
    }
    // Conservation: busy time equals executed work.
    let busy: u64 = m.resources.iter().map(|r| r.busy_us).sum();
    let rollout: u64 = r.samples.iter().map(|s| s.duration_us).sum();
    let train: u64 = r
        .trains
        .iter()
        .map(|t| (t.end - t.start) * t.resources.len() as u64)
        .sum();
    assert_eq!(busy, rollout + train);
    // Causality: training starts after each of its samples completed.
    for t in &r.trains {
        for &s in &t.samples {
            assert!(r.samples[s].completed_at <= t.start);
        }
    }
    assert_eq!(m.trained_samples, w.total_samples());
    let trained: usize = r.trains.iter().map(|t| t.samples.len()).sum();
    assert_eq!(trained, w.total_samples());
}

#[test]
fn invariants_hold_for_every_strategy() {
    let mut w = Workload::canonical();
    w.num_steps = 6;
    for cost in [0, 20_000] {
        w.transition_cost_us = cost;
        let (_, results) = compare(&Strategy::ALL, &mixed_cluster(4, 4), &w, 5).unwrap();
        for (s, r) in &results {
            check_invariants(r, &w);
            if *s == Strategy::Spatiotemporal {
                assert!(r.metrics.max_staleness <= 1);
            }
            if *s == Strategy::Naive || *s == Strategy::MicroBatch {
                assert_eq!(r.metrics.max_staleness, 0);
            }
        }
    }
}

#[test]
fn transition_cost_shows_up_as_bubble() {
    let mut w = Workload::canonical();
    w.num_steps = 4;
    let free = simulate(Strategy::Spatiotemporal, &mixed_cluster(4, 4), &w, 2).unwrap();
    w.transition_cost_us = 100_000;
    let costly = simulate(Strategy::Spatiotemporal, &mixed_cluster(4, 4), &w, 2).unwrap();
    assert!(costly.metrics.bubble_fraction > free.metrics.bubble_fraction);
}

#[test]
fn scenario_round_trips_through_json() {
    let s = Scenario::canonical(4);
    let text = serde_json::to_string(&s).unwrap();
    let back: Scenario = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
}
