use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

fn espl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_espl")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn train(dir: &Path, iters: &str) -> String {
    let config = config();
    ok(&espl(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--iters",
        iters,
        "--seed",
        "5",
        "--checkpoint-dir",
        dir.to_str().unwrap(),
    ]))
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = train(tmp.path(), "60");
    assert!(stdout.contains("iterations 0..60"), "{stdout}");
    assert!(stdout.contains("expected reward of top prompt"), "{stdout}");
    for name in ["metrics.jsonl", "ckpt-000050.json", "ckpt-000060.json"] {
        assert!(tmp.path().join(name).exists(), "{name} missing");
    }
    let lines = std::fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 61);
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    train(&full, "60");
    std::fs::create_dir_all(&part).unwrap();
    for name in ["metrics.jsonl", "ckpt-000050.json"] {
        std::fs::copy(full.join(name), part.join(name)).unwrap();
    }
    // The copied log runs past the checkpoint; resume must cut it back.
    let stdout = ok(&espl(&["resume", "--checkpoint", part.join("ckpt-000050.json").to_str().unwrap()]));
    assert!(stdout.contains("iterations 50..60"), "{stdout}");
    for name in ["metrics.jsonl", "ckpt-000060.json"] {
        assert_eq!(std::fs::read(full.join(name)).unwrap(), std::fs::read(part.join(name)).unwrap(), "{name}");
    }

    let stdout = ok(&espl(&["resume", "--checkpoint", part.join("ckpt-000060.json").to_str().unwrap(), "--iters", "70"]));
    assert!(stdout.contains("iterations 60..70"), "{stdout}");
    assert!(part.join("ckpt-000070.json").exists());
}

#[test]
fn export_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), "40");
    let ckpt = tmp.path().join("ckpt-000040.json");
    let dot = tmp.path().join("tree.dot");
    ok(&espl(&["export-tree", "--checkpoint", ckpt.to_str().unwrap(), "--output", dot.to_str().unwrap()]));
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("digraph"));

    let metrics = tmp.path().join("metrics.jsonl");
    let out = ok(&espl(&["replay-ratings", "--metrics", metrics.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["iterations"], 40);
    assert_eq!(report["mismatches"].as_array().unwrap().len(), 0);

    // Tamper with one logged posterior mean.
    let text = std::fs::read_to_string(&metrics).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[5]).unwrap();
    let mu = rec["posteriors"][0]["mu"].as_f64().unwrap();
    rec["posteriors"][0]["mu"] = serde_json::json!(mu + 0.5);
    lines[5] = rec.to_string();
    std::fs::write(&metrics, lines.join("\n") + "\n").unwrap();
    let out = espl(&["replay-ratings", "--metrics", metrics.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "m = 3\nunknown_knob = 1\n").unwrap();
    let out = espl(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint-dir", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
