use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use davel_core::config::RunConfig;

fn davel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_davel")).args(args).output().expect("spawn davel")
}

fn ok(args: &[&str]) -> String {
    let out = davel(args);
    assert!(
        out.status.success(),
        "davel {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_init_prints_valid_defaults() {
    let text = ok(&["config", "init"]);
    assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    ok(&["config", "init", "--out", s(&path)]);
    assert_eq!(fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("small.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&RunConfig::small()).unwrap()).unwrap();
    let (cfg, data, run) = (s(&cfg_path), root.join("data"), root.join("run"));

    let msg = ok(&["generate", "--config", cfg, "--out", s(&data)]);
    assert!(msg.contains("wrote 16 videos"), "{msg}");
    assert!(data.join("train.jsonl").is_file());

    let log = ok(&["train", "--config", cfg, "--data", s(&data), "--out", s(&run), "--seed", "3"]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2, "{log}");
    let best = run.join("best.ckpt");
    assert!(best.is_file() && run.join("last.ckpt").is_file() && run.join("config.json").is_file());

    let eval_dir = root.join("eval");
    let table = ok(&[
        "eval", "--config", cfg, "--checkpoint", s(&best), "--split", "test", "--data", s(&data), "--out",
        s(&eval_dir),
    ]);
    assert!(table.contains("Method") && table.contains("Avg."), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("test_report.json")).unwrap()).unwrap();
    let avg = report["avg_map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));
    for f in ["test_report.txt", "test_detections.jsonl", "test_routes.jsonl"] {
        assert!(eval_dir.join(f).is_file(), "{f}");
    }

    let id = "test-00000";
    let infer_dir = root.join("infer");
    ok(&[
        "infer",
        "--checkpoint",
        s(&best),
        "--audio",
        s(&data.join(format!("test/{id}.audio.davf"))),
        "--visual",
        s(&data.join(format!("test/{id}.visual.davf"))),
        "--id",
        id,
        "--out",
        s(&infer_dir),
    ]);
    let dets = fs::read_to_string(infer_dir.join("detections.jsonl")).unwrap();
    let routes = fs::read_to_string(infer_dir.join("routes.jsonl")).unwrap();
    assert_eq!(dets.lines().count(), 1);
    let route: serde_json::Value = serde_json::from_str(routes.lines().next().unwrap()).unwrap();
    assert_eq!(route["id"], id);
    assert_eq!(route["route"].as_array().unwrap().len(), RunConfig::small().model.moe_layers);

    // single-video inference matches the evaluation output for the same video
    let eval_dets = fs::read_to_string(eval_dir.join("test_detections.jsonl")).unwrap();
    assert_eq!(dets.lines().next(), eval_dets.lines().next());

    let attn_dir = root.join("attn");
    let listed = ok(&[
        "dump-attn", "--checkpoint", s(&best), "--id", id, "--split", "test", "--data", s(&data), "--out",
        s(&attn_dir),
    ]);
    assert_eq!(listed.lines().count(), 6);
    assert_eq!(fs::read_dir(&attn_dir).unwrap().count(), 6);
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = davel(&["eval", "--checkpoint", s(&missing), "--data", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 2, "warmup_epochs": 5}"#).unwrap();
    let out = davel(&["generate", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup_epochs"));

    let out = davel(&["infer", "--checkpoint", s(&missing)]);
    assert!(!out.status.success());
}

#[test]
fn mismatched_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let small = RunConfig::small();
    let cfg_path = root.join("small.json");
    fs::write(&cfg_path, serde_json::to_string(&small).unwrap()).unwrap();
    let data = root.join("data");
    ok(&["generate", "--config", s(&cfg_path), "--out", s(&data)]);
    let mut one = small.clone();
    one.epochs = 1;
    one.warmup_epochs = 0;
    fs::write(&cfg_path, serde_json::to_string(&one).unwrap()).unwrap();
    let run = root.join("run");
    ok(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run)]);

    let mut other = one.clone();
    other.model.dim = 32;
    let other_path = root.join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let out = davel(&[
        "eval", "--config", s(&other_path), "--checkpoint", s(&run.join("last.ckpt")), "--data", s(&data),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model configuration"));
}
