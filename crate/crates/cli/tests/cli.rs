use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rollplane"));
    for (k, _) in std::env::vars() {
        if k.starts_with("ROLLPLANE_") {
            c.env_remove(k);
        }
    }
    c
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn canonical() -> PathBuf {
    root().join("scenarios/canonical.json")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The shipped minimal config with every port set to 0 (ephemeral).
fn config_in(dir: &Path, ports: [u16; 5]) -> PathBuf {
    let text = fs::read_to_string(root().join("configs/minimal.toml")).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let key = line.split('=').next().unwrap().trim();
        let idx = ["engine", "trajectory", "rollout", "scheduler", "data"]
            .iter()
            .position(|k| *k == key && line.contains("81"));
        match idx {
            Some(i) => out.push_str(&format!("{key} = {}\n", ports[i])),
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    fs::copy(root().join("configs/tasks-20.jsonl"), dir.join("tasks-20.jsonl")).unwrap();
    let p = dir.join("stack.toml");
    fs::write(&p, out).unwrap();
    p
}

#[test]
fn compare_canonical_asserts_dominance() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["compare", "--assert-dominance", "--scenario"])
        .arg(canonical())
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dominance: holds"));
    for f in [
        "compare.txt",
        "compare.json",
        "metrics.jsonl",
        "trace-naive.jsonl",
        "trace-micro_batch.jsonl",
        "trace-off_policy_fill.jsonl",
        "trace-spatiotemporal.jsonl",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for l in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["bubble_fraction"].as_f64().is_some());
    }
}

#[test]
fn dominance_failure_sets_exit_status() {
    // Huge transition cost makes retagging expensive enough to lose.
    let dir = tempfile::tempdir().unwrap();
    let mut sc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(canonical()).unwrap()).unwrap();
    sc["workload"]["num_steps"] = 4.into();
    sc["workload"]["transition_cost_us"] = 50_000_000u64.into();
    let p = dir.path().join("costly.json");
    fs::write(&p, sc.to_string()).unwrap();
    let o = bin()
        .args(["compare", "--assert-dominance", "--scenario"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("VIOLATED"));
    let o = bin().args(["compare", "--scenario"]).arg(&p).output().unwrap();
    assert!(o.status.success());
}

#[test]
fn repeated_seed_gives_identical_bytes() {
    let run = |dir: &Path| {
        let o = bin()
            .args(["compare", "--seed", "3", "--scenario"])
            .arg(canonical())
            .arg("--out-dir")
            .arg(dir)
            .output()
            .unwrap();
        assert!(o.status.success());
        o.stdout
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        assert_eq!(
            fs::read(a.path().join(&n)).unwrap(),
            fs::read(b.path().join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn seed_flag_beats_env() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["simulate", "--scenario"]).arg(canonical());
        if let Some(e) = env {
            c.env("ROLLPLANE_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let file = run(None, None);
    let env5 = run(Some("5"), None);
    let flag5 = run(None, Some("5"));
    let both = run(Some("7"), Some("5"));
    assert!(file.contains("seed 0"));
    assert!(env5.contains("seed 5"));
    assert_eq!(env5, flag5);
    assert_eq!(both, flag5);
}

#[test]
fn simulate_writes_metrics_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["simulate", "--assert-dominance", "--scenario"])
        .arg(canonical())
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert!(first["kind"].is_string());
    assert!(first["t"].is_u64());
    assert!(fs::read_to_string(dir.path().join("metrics.txt"))
        .unwrap()
        .contains("bubble_fraction"));
}

#[test]
fn corrupt_scenario_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, "{\"cluster\": [").unwrap();
    let o = bin().args(["simulate", "--scenario"]).arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot parse scenario"), "{}", stderr(&o));
}

#[test]
fn incompatible_tagging_names_the_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(canonical()).unwrap()).unwrap();
    for n in sc["cluster"].as_array_mut().unwrap() {
        n["tags"] = serde_json::json!(["rollout"]);
    }
    let p = dir.path().join("s.json");
    fs::write(&p, sc.to_string()).unwrap();
    let o = bin().args(["compare", "--scenario"]).arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("incompatible tagging"), "{}", stderr(&o));
    assert!(stderr(&o).contains("naive"), "{}", stderr(&o));
}

#[test]
fn missing_cluster_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, "schema_version = 1\n").unwrap();
    let o = bin().args(["export-traj", "--config"]).arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cluster"), "{}", stderr(&o));
}

#[test]
fn export_then_replay_matches_live_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), [0; 5]);
    let out = dir.path().join("out");
    let o = bin()
        .args(["export-traj", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("20 episodes"));
    let traj = fs::read_to_string(out.join("trajectories.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 20);

    let log = out.join("event_log.jsonl");
    let snap = out.join("controller_state.json");
    let o = bin().arg("replay").arg(&log).arg("--snapshot").arg(&snap).output().unwrap();
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("snapshot: match"));
    let again = bin().arg("replay").arg(&log).arg("--snapshot").arg(&snap).output().unwrap();
    assert_eq!(o.stdout, again.stdout);

    // A snapshot from a different run diverges.
    let mut s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&snap).unwrap()).unwrap();
    s["version"] = 99.into();
    let bad = dir.path().join("bad_state.json");
    fs::write(&bad, s.to_string()).unwrap();
    let o = bin().arg("replay").arg(&log).arg("--snapshot").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("snapshot: differs"));

    // Truncated final line.
    let bytes = fs::read(&log).unwrap();
    let cut = dir.path().join("cut.jsonl");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let o = bin().arg("replay").arg(&cut).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
}

#[test]
fn empty_log_replays_to_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    fs::write(&p, "").unwrap();
    let o = bin().arg("replay").arg(&p).output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let v: serde_json::Value = serde_json::from_str(&text[..text.rfind('}').unwrap() + 1]).unwrap();
    assert_eq!(v["lines"], 0);
    assert_eq!(v["final_state"]["version"], 0);
}

#[test]
fn export_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), [0; 5]);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = bin()
            .args(["export-traj", "--seed", "11", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read(out.join("trajectories.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn serve_starts_in_order_and_processes_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), [0; 5]);
    let o = bin()
        .args(["serve", "--exit-when-done", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let ready: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("ready "))
        .map(|l| l.split(' ').next().unwrap())
        .collect();
    assert_eq!(ready, ["engine", "trajectory", "rollout", "scheduler", "data"]);
    assert!(text.contains("20 episodes"), "{text}");
    assert!(text.contains("stopped data scheduler rollout trajectory engine"), "{text}");
}

#[test]
fn serve_reports_port_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port();
    let cfg = config_in(dir.path(), [0, 0, 0, 0, port]);
    let o = bin()
        .args(["serve", "--exit-when-done", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("port conflict"), "{}", stderr(&o));
    assert!(stderr(&o).contains("data"), "{}", stderr(&o));
    drop(held);
}
