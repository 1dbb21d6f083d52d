use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use rollplane_core::dataloader::StreamingDataloader;
use rollplane_core::replay::{check_snapshot, parse_log, replay as replay_log};
use rollplane_core::rollout::ControllerState;
use rollplane_core::runtime::{RunReport, Runtime};
use rollplane_core::ModelVersion;
use rollplane_server::{start, Services};

use crate::config::{Config, Overrides};
use crate::{ensure_dir, write_file, CliError, Outcome, ReplayArgs, ServeArgs, StackArgs};

fn prepare(a: &StackArgs, host: Option<String>) -> Result<(Config, Runtime), CliError> {
    let mut cfg = Config::load(&a.config)?;
    cfg.apply(&Overrides {
        seed: a.seed,
        tasks: a.tasks.clone(),
        host,
    });
    cfg.validate()?;
    let src = cfg.dataloader.source.clone().ok_or(CliError::NoTasks)?;
    let file = File::open(&src).map_err(CliError::io(&src))?;
    let loader = StreamingDataloader::new();
    loader
        .load(BufReader::new(file))
        .map_err(|source| CliError::Tasks {
            path: src.clone(),
            source,
        })?;
    let rt = Runtime::with_engine(
        cfg.runtime_config(),
        cfg.engine_config(),
        cfg.proxy_config(),
        cfg.descriptors(),
        Arc::new(loader),
    )?;
    Ok((cfg, rt))
}

#[derive(Serialize)]
struct Summary {
    ticks: u64,
    episodes: usize,
    batches: usize,
    trajectories: usize,
    final_version: ModelVersion,
}

fn summary(r: &RunReport) -> Summary {
    Summary {
        ticks: r.ticks,
        episodes: r.episodes,
        batches: r.batches,
        trajectories: r.trained.len(),
        final_version: r.final_version,
    }
}

fn write_artifacts(dir: &Path, rt: &Runtime, report: &RunReport) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let mut traj = String::new();
    for t in &report.trained {
        traj.push_str(&t.trajectory.to_record().to_line());
        traj.push('\n');
    }
    write_file(&dir.join("trajectories.jsonl"), &traj)?;
    write_file(&dir.join("event_log.jsonl"), &rt.rollout().event_log_lines())?;
    let state = serde_json::to_string_pretty(&rt.rollout().state()).expect("state serializes");
    write_file(&dir.join("controller_state.json"), &format!("{state}\n"))?;
    let s = serde_json::to_string_pretty(&summary(report)).expect("summary serializes");
    write_file(&dir.join("run_report.json"), &format!("{s}\n"))
}

fn print_summary(r: &RunReport) {
    println!(
        "run complete: {} episodes, {} batches, {} trajectories, version {}, {} ticks",
        r.episodes,
        r.batches,
        r.trained.len(),
        r.final_version,
        r.ticks
    );
}

pub fn export(a: StackArgs) -> Result<Outcome, CliError> {
    let (_, mut rt) = prepare(&a, None)?;
    let report = rt.run()?;
    print_summary(&report);
    if let Some(dir) = &a.out_dir {
        write_artifacts(dir, &rt, &report)?;
    } else {
        for t in &report.trained {
            println!("{}", t.trajectory.to_record().to_line());
        }
    }
    Ok(Outcome::Ok)
}

pub fn serve(a: ServeArgs) -> Result<Outcome, CliError> {
    let (cfg, mut rt) = prepare(&a.stack, a.host.clone())?;
    let services = Services::from_runtime(&rt);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::io("tokio runtime"))?;
    runtime.block_on(async move {
        let stack = start(&services, &cfg.addrs(), |svc, addr| {
            println!("ready {} http://{addr}", svc.name());
        })
        .await?;
        let (rt, result) = tokio::task::spawn_blocking(move || {
            let r = rt.run();
            (rt, r)
        })
        .await
        .expect("runtime thread panicked");
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                stack.shutdown().await;
                return Err(e.into());
            }
        };
        print_summary(&report);
        if let Some(dir) = &a.stack.out_dir {
            write_artifacts(dir, &rt, &report)?;
        }
        if !a.exit_when_done {
            println!("serving; Ctrl-C to stop");
            let _ = tokio::signal::ctrl_c().await;
        }
        let order = stack.shutdown().await;
        let names: Vec<_> = order.iter().map(|s| s.name()).collect();
        println!("stopped {}", names.join(" "));
        Ok(Outcome::Ok)
    })
}

pub fn replay(a: ReplayArgs) -> Result<Outcome, CliError> {
    let bytes = std::fs::read(&a.log).map_err(CliError::io(&a.log))?;
    let lines = parse_log(&bytes)?;
    let report = replay_log(&lines);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    let mut ok = report.is_consistent();
    for d in &report.divergences {
        println!("divergence at line {}: {}", d.line, d.reason);
    }
    if let Some(path) = &a.snapshot {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let snap: ControllerState =
            serde_json::from_str(&text).map_err(|e| CliError::Snapshot {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let diffs = check_snapshot(&report, &snap);
        if diffs.is_empty() {
            println!("snapshot: match");
        } else {
            ok = false;
            for d in diffs {
                println!("snapshot: differs: {d}");
            }
        }
    }
    Ok(if ok { Outcome::Ok } else { Outcome::CheckFailed })
}
