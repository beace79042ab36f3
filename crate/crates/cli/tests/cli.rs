use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mixflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixflow")).args(args).output().expect("binary runs")
}

fn small_config() -> Value {
    json!({
        "seed": 3,
        "steps": 4,
        "batch_size": 32,
        "sources": [
            {
                "source_id": 0,
                "record_count": 256,
                "text_len": { "family": "lognormal", "mu": 3.0, "sigma": 0.55 },
                "image_prob": 0.5,
                "image_patches": { "family": "lognormal", "mu": 5.0, "sigma": 0.5 }
            },
            {
                "source_id": 1,
                "record_count": 256,
                "text_len": { "family": "pareto", "scale": 100.0, "shape": 1.5 }
            }
        ],
        "schedule": { "phases": [{ "start": 0, "end": 4, "weights": [0.5, 0.5] }], "granularity": "step" },
        "parallelism": { "pp": 2, "dp": 2, "cp": 1, "tp": 2, "microbatches": 2 },
        "strategy": { "kind": "hybrid" }
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(mixflow(&["gen", "--config", &cfg, "--out", path(&a)]).status.success());
    assert!(mixflow(&["gen", "--config", &cfg, "--out", path(&b)]).status.success());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn run_from_generated_files_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    let plain = write_config(dir.path(), "plain.json", &cfg);
    let data = dir.path().join("data");
    assert!(mixflow(&["gen", "--config", &plain, "--out", path(&data)]).status.success());
    cfg["data_dir"] = json!(data);
    let on_disk = write_config(dir.path(), "disk.json", &cfg);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(mixflow(&["run", "--config", &plain, "--out", path(&a), "--format", "csv"]).status.success());
    assert!(mixflow(&["run", "--config", &on_disk, "--out", path(&b), "--format", "csv"]).status.success());
    assert_eq!(fs::read(a.join("steps.csv")).unwrap(), fs::read(b.join("steps.csv")).unwrap());
    assert_eq!(fs::read(a.join("microbatches.csv")).unwrap(), fs::read(b.join("microbatches.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let one = dir.path().join("one");
    let eight = dir.path().join("eight");
    let a = mixflow(&["run", "--config", &cfg, "--out", path(&one), "--threads", "1", "--format", "json"]);
    let b = mixflow(&["run", "--config", &cfg, "--out", path(&eight), "--threads", "8", "--format", "json"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(fs::read(one.join("metrics.json")).unwrap(), fs::read(eight.join("metrics.json")).unwrap());
}

#[test]
fn dumps_topology_and_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let out = dir.path().join("out");
    let o = mixflow(&["run", "--config", &cfg, "--out", path(&out), "--dump-topology", "--dump-dgraph"]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("tree pp=2 dp=2 cp=1 tp=2 world=8"));
    let dot = fs::read_to_string(out.join("dgraph-0000-0.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
}

#[test]
fn replay_reproduces_and_detects_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["faults"] = json!({ "faults": [{ "fault": "kill_mid_plan", "source": 0, "shard": 0, "step": 2 }] });
    let run_cfg = write_config(dir.path(), "run.json", &cfg);
    let ckpt = dir.path().join("ckpt");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = mixflow(&["run", "--config", &run_cfg, "--out", path(&a), "--checkpoint-dir", path(&ckpt)]);
    assert!(o.status.success());
    let o = mixflow(&["replay", "--config", &run_cfg, "--checkpoint-dir", path(&ckpt), "--out", path(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());

    cfg["seed"] = json!(4);
    let other = write_config(dir.path(), "other.json", &cfg);
    let o = mixflow(&["replay", "--config", &other, "--checkpoint-dir", path(&ckpt), "--out", path(&b)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let mut bad = small_config();
    bad["sources"][1]["source_id"] = json!(5);
    let bad = write_config(dir.path(), "bad.json", &bad);
    assert_eq!(mixflow(&["run", "--config", &bad, "--out", path(&out)]).status.code(), Some(2));

    let mut tight = small_config();
    tight["envelope"] = json!({
        "total_blocks": 2,
        "total_memory": 1u64 << 40,
        "constructor_blocks": 0,
        "planner_blocks": 0,
        "reserved_memory": 0,
        "w_src": 8,
        "w_actor": 8,
        "clusters": 2,
        "actor_memory": 1024,
        "worker_ctx_bytes": 1024,
        "buffer_bytes": 1024,
        "grouping": false
    });
    let tight = write_config(dir.path(), "tight.json", &tight);
    let o = mixflow(&["run", "--config", &tight, "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let data = dir.path().join("data");
    let plain = write_config(dir.path(), "plain.json", &small_config());
    assert!(mixflow(&["gen", "--config", &plain, "--out", path(&data)]).status.success());
    fs::write(data.join("source-001.bin"), b"tampered").unwrap();
    let mut cfg = small_config();
    cfg["data_dir"] = json!(data);
    let tampered = write_config(dir.path(), "tampered.json", &cfg);
    assert_eq!(mixflow(&["run", "--config", &tampered, "--out", path(&out)]).status.code(), Some(4));

    assert_eq!(mixflow(&["run", "--bogus"]).status.code(), Some(2));
}

#[test]
fn report_formats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let out = dir.path().join("out");
    assert!(mixflow(&["run", "--config", &cfg, "--out", path(&out), "--format", "both"]).status.success());
    let again = dir.path().join("again");
    let metrics = out.join("metrics.json");
    assert!(mixflow(&["report", "--metrics", path(&metrics), "--out", path(&again)]).status.success());
    assert_eq!(fs::read(out.join("steps.csv")).unwrap(), fs::read(again.join("steps.csv")).unwrap());

    let frame: Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    let csv = fs::read_to_string(out.join("steps.csv")).unwrap();
    for (row, step) in csv.lines().skip(1).zip(frame["steps"].as_array().unwrap()) {
        let t: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(t, step["t_iter"].as_f64().unwrap());
    }
}

#[test]
fn bench_balance_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = mixflow(&["bench-balance", "--out", path(&out), "--trials", "10", "--methods", "kk"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("level,method,"));
}
