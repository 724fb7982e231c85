use std::path::Path;
use std::process::{Command, Output};

fn loraserve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loraserve")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_fleet_file_is_a_config_error() {
    let o = loraserve(&["simulate", "--fleet", "/nonexistent/fleet.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fleet"));
}

#[test]
fn unknown_policy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = loraserve(&["simulate", "--policy", "fastest", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_two_point_profile() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("fig9.csv");
    std::fs::write(
        &csv,
        "kernel,batch_size,max_rank,sum_rank,latency_ms\nbgmv,24,32,768,34.8\nbgmv,16,64,1024,35.8\nmbgmv,24,32,768,35.3\nmbgmv,16,64,1024,35.9\n",
    )
    .unwrap();
    let o = loraserve(&["fit-perf", "--profile", path(&csv), "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("perf-bgmv.json")).unwrap()).unwrap();
    assert!((m["alpha"].as_f64().unwrap() - 1.0 / 256.0).abs() < 1e-12);
    assert!((m["beta"].as_f64().unwrap() - 31.8).abs() < 1e-9);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("perf-mbgmv.json")).unwrap()).unwrap();
    assert!((m["alpha"].as_f64().unwrap() - 0.00234375).abs() < 1e-12);
    assert!((m["beta"].as_f64().unwrap() - 33.5).abs() < 1e-9);
}

#[test]
fn fit_rejects_empty_and_degenerate_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "kernel,batch_size,max_rank,sum_rank,latency_ms\n").unwrap();
    assert_eq!(loraserve(&["fit-perf", "--profile", path(&empty), "--out", path(dir.path())]).status.code(), Some(2));
    let flat = dir.path().join("flat.csv");
    std::fs::write(&flat, "kernel,batch_size,max_rank,sum_rank,latency_ms\nbgmv,2,8,16,3.0\nbgmv,4,4,16,3.5\n")
        .unwrap();
    let o = loraserve(&["fit-perf", "--profile", path(&flat), "--kernel", "bgmv", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = loraserve(&["fit-perf", "--profile", "/nonexistent.csv", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn instrumented_fit_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = loraserve(&["fit-perf", "--instrumented", "--hidden", "8", "--max-batch", "4", "--out", path(dir.path())]);
    assert!(o.status.success());
    assert!(dir.path().join("profile.csv").exists());
    for k in ["bgmv", "mbgmv"] {
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(format!("perf-{k}.json"))).unwrap()).unwrap();
        assert_eq!(m["r_squared"].as_f64(), Some(1.0));
    }
}

#[test]
fn demo_spawns_one_worker_per_slice() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = loraserve(&["demo-split-prefill", "--cores", "3", "--tokens", "5", "--cap", "2", "--out", path(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["workers"], 3);
    assert_eq!(r["degraded"], false);
    assert!(r["rel_diff"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn demo_survives_a_worker_crash() {
    let o = loraserve(&["demo-split-prefill", "--cores", "2", "--tokens", "8", "--cap", "4", "--die-at", "1:1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("worker fault"));
}

#[test]
fn demo_without_load_latency_has_no_cold_start() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = loraserve(&["demo-split-prefill", "--inline", "--load-ms", "0", "--out", path(&report)]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let ttft: Vec<(String, f64)> = serde_json::from_value(r["ttft_ms"].clone()).unwrap();
    let get = |m: &str| ttft.iter().find(|(k, _)| k == m).unwrap().1;
    assert_eq!(get("assisted"), get("cached"));
    assert_eq!(get("ondmd"), get("cached"));
}

#[test]
fn demo_rejects_bad_sizes() {
    assert_eq!(loraserve(&["demo-split-prefill", "--tokens", "0"]).status.code(), Some(2));
    assert_eq!(loraserve(&["demo-split-prefill", "--inline", "--hidden", "5", "--heads", "2"]).status.code(), Some(2));
}

#[test]
fn simulate_replays_a_generated_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    assert!(loraserve(&["gen-workload", "--duration-s", "5", "--seed", "3", "--out", path(&trace)]).status.success());
    let out = dir.path().join("sim");
    let o = loraserve(&["simulate", "--trace", path(&trace), "--policy", "rank-aware,most-idle", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&trace).unwrap(), std::fs::read(out.join("trace.csv")).unwrap());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let header = std::fs::read_to_string(out.join("requests-rank-aware.csv")).unwrap();
    assert!(header.starts_with("id,ttft_ms,tpt_ms,latency_ms,slo_met"));
}
