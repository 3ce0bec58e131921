//! End-to-end checks of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dystruct(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dystruct"));
    cmd.current_dir(dir).args(args).env_remove("DYSTRUCT_SEED");
    if let Some(s) = env_seed {
        cmd.env("DYSTRUCT_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str], env_seed: Option<&str>) -> String {
    let out = dystruct(dir, args, env_seed);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn transcript_config(dir: &Path, extra: &[&str], env_seed: Option<&str>) -> Value {
    let mut args = vec![
        "decode",
        "--toy",
        "c.jsonl",
        "--prompt-id",
        "toy-0001",
        "--transcript",
        "t.json",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args, env_seed);
    let t: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("t.json")).unwrap()).unwrap();
    t["config"].clone()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &["corpus", "--n", "6", "--out", "c.jsonl", "--seed", "11"],
        None,
    );
    tmp
}

#[test]
fn flags_override_file_and_env_overrides_file_seed() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), "budget = 40\nseed = 3\nr_weld = 2\n").unwrap();

    let c = transcript_config(dir, &["--config", "run.toml"], None);
    assert_eq!(c["budget"], 40);
    assert_eq!(c["seed"], 3);
    assert_eq!(c["r_weld"], 2);

    let c = transcript_config(dir, &["--config", "run.toml", "--budget", "50"], Some("8"));
    assert_eq!(c["budget"], 50);
    assert_eq!(c["seed"], 8);

    let c = transcript_config(dir, &["--config", "run.toml", "--seed", "9"], Some("8"));
    assert_eq!(c["seed"], 9);
}

#[test]
fn decode_is_reproducible_and_seed_sensitive_only_through_the_seed() {
    let tmp = setup();
    let dir = tmp.path();
    let a = ok(
        dir,
        &["decode", "--toy", "c.jsonl", "--prompt-id", "toy-0003"],
        Some("1"),
    );
    let b = ok(
        dir,
        &["decode", "--toy", "c.jsonl", "--prompt-id", "toy-0003", "--seed", "1"],
        None,
    );
    assert_eq!(a, b);
    assert!(!a.trim().is_empty());
}

#[test]
fn bad_config_is_reported() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "budget = \"lots\"\n").unwrap();
    let out = dystruct(
        dir,
        &[
            "decode",
            "--toy",
            "c.jsonl",
            "--prompt-id",
            "toy-0001",
            "--config",
            "bad.toml",
        ],
        None,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));

    let out = dystruct(dir, &["decode", "--prompt", "5,6"], None);
    assert!(!out.status.success());
}

#[test]
fn bench_then_stats() {
    let tmp = setup();
    let dir = tmp.path();
    let summary = ok(
        dir,
        &[
            "bench",
            "--corpus",
            "c.jsonl",
            "--out",
            "r.csv",
            "--methods",
            "dystruct,dystruct-no-weld",
            "--plots",
            "plots",
        ],
        Some("2"),
    );
    assert_eq!(summary.lines().count(), 2);
    let csv = std::fs::read_to_string(dir.join("r.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,prompt_id,seed,exact,tok_acc,toks,blks,calls,iters"
    );
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("2")));
    for f in ["calls.svg", "accuracy.svg", "token_accuracy.svg"] {
        assert!(dir.join("plots").join(f).exists());
    }

    let out = ok(
        dir,
        &[
            "stats",
            "r.csv",
            "r.csv",
            "--method-a",
            "dystruct",
            "--method-b",
            "dystruct-no-weld",
        ],
        None,
    );
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n"], 6);
    let b = v["b"].as_u64().unwrap();
    let c = v["c"].as_u64().unwrap();
    assert!(b + c <= 6);
    let p = v["p_exact"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn partition_reports_map_and_posterior() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("p.json"), r#"{"q":[0.95,0.05,0.95],"alphas":[1.0,1.0,1.0]}"#).unwrap();
    let v: Value = serde_json::from_str(&ok(dir, &["partition", "--input", "p.json"], None)).unwrap();
    assert_eq!(v["cuts"], serde_json::json!([1, 0, 1]));
    assert_eq!(v["blocks"], serde_json::json!([[0, 1], [1, 3], [3, 4]]));
    let post = v["posterior"].as_array().unwrap();
    assert_eq!(post.len(), 8);
    let total: f64 = post.iter().map(|e| e["p"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    std::fs::write(
        dir.join("p2.json"),
        r#"{"q":[0.5],"alpha0":1.5,"hbar":0.5,"logits":[0.0]}"#,
    )
    .unwrap();
    let v: Value = serde_json::from_str(&ok(dir, &["partition", "--input", "p2.json"], None)).unwrap();
    assert!(v["log_posterior"].as_f64().unwrap() < 0.0);

    std::fs::write(dir.join("bad.json"), r#"{"q":[0.5]}"#).unwrap();
    assert!(!dystruct(dir, &["partition", "--input", "bad.json"], None)
        .status
        .success());
}

#[test]
fn calibrate_writes_weights() {
    let tmp = setup();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "calibrate",
            "--corpus",
            "c.jsonl",
            "--seeds",
            "0,1",
            "--out",
            "w.json",
            "--records-out",
            "rec.jsonl",
        ],
        None,
    );
    let w: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("w.json")).unwrap()).unwrap();
    assert_eq!(w["w"].as_array().unwrap().len(), 7);
    assert_eq!(w["w_b"].as_array().unwrap().len(), 4);
    assert!(w["meta"].is_object());

    ok(dir, &["calibrate", "--records", "rec.jsonl", "--out", "w2.json"], None);
    assert_eq!(
        std::fs::read_to_string(dir.join("w.json")).unwrap(),
        std::fs::read_to_string(dir.join("w2.json")).unwrap()
    );
    ok(
        dir,
        &[
            "decode",
            "--toy",
            "c.jsonl",
            "--prompt-id",
            "toy-0000",
            "--weights",
            "w.json",
        ],
        None,
    );
}
