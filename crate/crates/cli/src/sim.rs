use std::path::Path;

use rollplane_core::sim::{self, CompareReport, Scenario, Strategy};

use crate::config::Format;
use crate::{ensure_dir, write_file, CliError, Outcome, SimArgs};

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    Format::of(path)
        .decode(&text)
        .map_err(|message| CliError::Scenario {
            path: path.to_path_buf(),
            message,
        })
}

fn scenario(a: &SimArgs) -> Result<Scenario, CliError> {
    let mut s = load_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    s.workload.validate()?;
    Ok(s)
}

fn report_dominance(report: &CompareReport) -> Outcome {
    println!(
        "dominance: {} (strict: {})",
        if report.dominance { "holds" } else { "VIOLATED" },
        report.strict_dominance
    );
    if report.dominance {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    }
}

pub fn simulate(a: SimArgs) -> Result<Outcome, CliError> {
    let s = scenario(&a)?;
    let cluster = if s.strategy == Strategy::Spatiotemporal {
        s.cluster.clone()
    } else {
        sim::disaggregate(&s.cluster)
    };
    let r = sim::simulate(s.strategy, &cluster, &s.workload, s.seed)?;
    let m = &r.metrics;
    let table = format!(
        "strategy {}  seed {}\nbubble_fraction {:.4}\ntrain_node_bubble {:.4}\nrollout_node_bubble {:.4}\nmakespan_us {}\nmean_staleness {:.4}\nmax_staleness {}\ntrained_samples {}\n",
        m.strategy,
        s.seed,
        m.bubble_fraction,
        m.train_node_bubble,
        m.rollout_node_bubble,
        m.makespan_us,
        m.mean_staleness,
        m.max_staleness,
        m.trained_samples
    );
    print!("{table}");
    if let Some(dir) = &a.out_dir {
        ensure_dir(dir)?;
        write_file(&dir.join("metrics.txt"), &table)?;
        write_file(&dir.join("metrics.jsonl"), &format!("{}\n", m.to_line()))?;
        write_file(&dir.join("trace.jsonl"), &r.trace_lines())?;
    }
    if a.assert_dominance {
        let (report, _) = sim::compare(&Strategy::ALL, &s.cluster, &s.workload, s.seed)?;
        return Ok(report_dominance(&report));
    }
    Ok(Outcome::Ok)
}

pub fn compare(a: SimArgs) -> Result<Outcome, CliError> {
    let s = scenario(&a)?;
    let (report, results) = sim::compare(&Strategy::ALL, &s.cluster, &s.workload, s.seed)?;
    let table = report.table();
    print!("{table}");
    if let Some(dir) = &a.out_dir {
        ensure_dir(dir)?;
        write_file(&dir.join("compare.txt"), &table)?;
        let mut lines = String::new();
        for r in results.values() {
            lines.push_str(&r.metrics.to_line());
            lines.push('\n');
        }
        write_file(&dir.join("metrics.jsonl"), &lines)?;
        let summary = serde_json::to_string(&report).expect("report serializes");
        write_file(&dir.join("compare.json"), &format!("{summary}\n"))?;
        for (strategy, r) in &results {
            write_file(&dir.join(format!("trace-{strategy}.jsonl")), &r.trace_lines())?;
        }
    }
    if a.assert_dominance {
        return Ok(report_dominance(&report));
    }
    Ok(Outcome::Ok)
}
