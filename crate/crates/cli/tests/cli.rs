use std::path::Path;
use std::process::{Command, Output};

fn kvprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn zero_threshold_run_is_lossless() {
    let out = kvprune(&[
        "run",
        "--synthetic",
        "gaussian:n=64,d=16,seed=2",
        "--thr",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let m = json(&out);
    assert_eq!(m["total_reduction"], 1.0);
    assert!(m["output_max_abs_error"].as_f64().unwrap() <= 1e-9);
    assert_eq!(m["survivors"], 64);
}

#[test]
fn peaked_run_metrics_are_consistent() {
    let out = kvprune(&[
        "run",
        "--synthetic",
        "peaked:k=8,gap=16,n=2048,d=64,seed=1",
        "--verify",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let m = json(&out);
    let f = |k: &str| m[k].as_f64().unwrap();
    assert_eq!(m["survivors"], 8);
    assert_eq!(
        f("total_reduction"),
        f("bytes_baseline") / (f("bytes_k") + f("bytes_v"))
    );
    assert_eq!(f("v_access_reduction"), f("n_tokens") / f("survivors"));
    assert_eq!(
        f("k_access_reduction"),
        f("n_tokens") * 3.0 / f("chunks_fetched")
    );
    assert!(f("pruned_true_mass") < f("thr") * f("tokens_pruned"));
    assert!(m["approximate"]["energy_pj"].as_f64().unwrap() > 0.0);
}

#[test]
fn identical_commands_give_identical_json() {
    let args = [
        "run",
        "--synthetic",
        "locality:n=300,d=32,seed=9",
        "--mem",
        "latency=80,bw=32",
    ];
    let a = kvprune(&args);
    let b = kvprune(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn verify_passes_on_sound_runs() {
    let out = kvprune(&[
        "verify",
        "--synthetic",
        "gaussian:sigma=2,n=128,d=16,seed=0",
        "--seeds",
        "8",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json(&out);
    assert_eq!(r["pass"], true);
    assert_eq!(r["runs"], 8);
    assert_eq!(r["violations"], 0);
}

#[test]
fn injected_margin_fault_fails_verification() {
    let out = kvprune(&[
        "verify",
        "--synthetic",
        "gaussian:sigma=2,n=256,d=64,seed=3",
        "--mode",
        "functional",
        "--inject-margin-fault",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let r = json(&out);
    assert_eq!(r["pass"], false);
    assert!(r["violations"].as_u64().unwrap() > 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("FAIL"), "{stderr}");
}

#[test]
fn generated_trace_runs_like_the_synthetic_spec() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("w.tpkv");
    let spec = "peaked:k=4,gap=12,n=500,d=32,seed=5";
    let gen = kvprune(&["gen", "--synthetic", spec, "--out", trace.to_str().unwrap()]);
    assert_eq!(gen.status.code(), Some(0));
    let from_file = kvprune(&["run", "--trace", trace.to_str().unwrap()]);
    let direct = kvprune(&["run", "--synthetic", spec]);
    assert_eq!(from_file.stdout, direct.stdout);
}

#[test]
fn outputs_go_to_files() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.json");
    let events = dir.path().join("e.csv");
    let out = kvprune(&[
        "run",
        "--synthetic",
        "peaked:k=2,n=64,d=8",
        "--mode",
        "ooo",
        "--out",
        metrics.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(m["primary_mode"], "ooo");
    let csv = std::fs::read_to_string(&events).unwrap();
    assert!(csv.starts_with("cycle,event,token,chunk\n"));
    assert!(csv.lines().count() > 64);
}

#[test]
fn sweep_emits_one_point_per_threshold_and_seed() {
    let out = kvprune(&[
        "sweep",
        "--synthetic",
        "locality:n=128,d=16",
        "--thr-list",
        "0,1e-3,1e-2",
        "--seeds",
        "2",
        "--mode",
        "functional",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let pts = json(&out);
    let pts = pts.as_array().unwrap();
    assert_eq!(pts.len(), 6);
    let survivors: Vec<u64> = pts
        .iter()
        .map(|p| p["metrics"]["survivors"].as_u64().unwrap())
        .collect();
    // A larger threshold never keeps more tokens of the same instance.
    assert!(survivors[0] >= survivors[2] && survivors[2] >= survivors[4]);
    assert!(survivors[1] >= survivors[3] && survivors[3] >= survivors[5]);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"prune": {"thr": 0.01}, "sim": {"lanes": 4},
            "synthetic": {"distribution": {"kind": "gaussian", "sigma": 1.0}, "n": 40, "d_h": 8, "seed": 1}}"#,
    )
    .unwrap();
    let out = kvprune(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "functional",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = json(&out);
    assert_eq!(m["thr"], 0.01);
    assert_eq!(m["n_tokens"], 40);
}

fn error_kind(out: &Output) -> String {
    let e: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    e["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn bad_magic_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tpkv");
    std::fs::write(&path, b"NOPE\x01\x00").unwrap();
    let out = kvprune(&["run", "--trace", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "format");
}

#[test]
fn missing_file_is_an_io_failure() {
    let out = kvprune(&[
        "run",
        "--trace",
        Path::new("/definitely/not/here.tpkv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "io");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(kvprune(&["run"]).status.code(), Some(1));
    assert_eq!(kvprune(&["frobnicate"]).status.code(), Some(1));
    let bad_thr = kvprune(&["run", "--synthetic", "gaussian", "--thr", "1.5"]);
    assert_eq!(bad_thr.status.code(), Some(1));
    assert_eq!(error_kind(&bad_thr), "config");
    let bad_chunks = kvprune(&["run", "--synthetic", "gaussian", "--chunk-bits", "9"]);
    assert_eq!(bad_chunks.status.code(), Some(1));
    assert_eq!(
        kvprune(&["run", "--synthetic", "gaussian", "--mem", "speed=3"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn alternative_chunking_runs() {
    let out = kvprune(&[
        "run",
        "--synthetic",
        "peaked:k=3,n=100,d=8",
        "--chunks",
        "3",
        "--chunk-bits",
        "2",
        "--order",
        "sequential",
        "--verify",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = json(&out);
    assert_eq!(m["tokens_pruned_at_chunk"].as_array().unwrap().len(), 3);
    // 6-bit vectors: 8 elements x 6 bits x 2 tensors x 100 tokens.
    assert_eq!(m["bytes_baseline"], 1200.0);
}
