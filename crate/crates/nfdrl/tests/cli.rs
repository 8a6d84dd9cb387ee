use std::path::Path;
use std::process::{Command, Output};

fn nfdrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfdrl"))
        .args(args)
        .env("NFDRL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn short_train(env: &str, seed: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--env", env, "--seed", seed, "--out", out.to_str().unwrap()];
    args.extend_from_slice(&[
        "--total_timesteps",
        "1500",
        "--eval_interval",
        "500",
        "--eval_rollouts",
        "200",
        "--hidden_size_1",
        "16",
        "--hidden_size_2",
        "16",
    ]);
    args.extend_from_slice(extra);
    nfdrl(&args)
}

#[test]
fn train_is_deterministic_and_config_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(short_train("mdp1", "7", &a, &[]).status.code(), Some(0));
    assert_eq!(short_train("mdp1", "7", &b, &[]).status.code(), Some(0));
    for name in ["metrics.csv", "distributions.csv", "checkpoint.json", "config.json"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
    let metrics = read(&a.join("metrics.csv"));
    assert!(metrics.starts_with("step,loss,eval_cramer_mean,greedy_return_mean,epsilon\n"));
    assert_eq!(metrics.lines().count(), 4);
    assert!(!metrics.contains('\r'));

    let cfg = a.join("config.json");
    let out = nfdrl(&["train", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read(&a.join("metrics.csv")), read(&c.join("metrics.csv")));
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    short_train("mdp1", "1", &a, &[]);
    short_train("mdp1", "2", &b, &[]);
    assert_ne!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = nfdrl(&[
        "train",
        "--config",
        "/nonexistent/cfg.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"env": "mdp1", "batch_size": -3}"#).unwrap();
    let o = nfdrl(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    std::fs::write(&bad, r#"{"learnig_rate": 0.1}"#).unwrap();
    let o = nfdrl(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learnig_rate"));

    let o = nfdrl(&["train", "--env", "pong", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = nfdrl(&["train", "--loss", "huber", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss_kind"));
    assert!(!out.exists());
}

#[test]
fn props_reports_every_property() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfdrl(&["props", "--trials", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 7);
    assert_eq!(read(&dir.path().join("props.jsonl")), stdout);
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["pass"], true, "{line}");
        assert_eq!(v["trials"].as_u64().map(|t| t >= 1), Some(true));
    }
    assert!(read(&dir.path().join("bellman_scaling.csv")).starts_with("gamma,min_ratio,max_ratio,contracts\n"));
    assert_eq!(nfdrl(&["props", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn props_default_trials_pass() {
    let o = nfdrl(&["props"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 7);
}

#[test]
fn export_frozenlake_groups_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(
        short_train(
            "frozenlake",
            "0",
            &run,
            &["--total_timesteps", "600", "--eval_interval", "600"]
        )
        .status
        .code(),
        Some(0)
    );
    let ck = run.join("checkpoint.json");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        let o = nfdrl(&[
            "export",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--out",
            e.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let csv = read(&e1.join("distributions.csv"));
    assert_eq!(csv, read(&e2.join("distributions.csv")));
    assert_eq!(csv, read(&run.join("distributions.csv")));
    let mut groups = std::collections::BTreeSet::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        groups.insert((f[0].parse::<usize>().unwrap(), f[1].parse::<usize>().unwrap()));
        assert!(f[3].parse::<f64>().unwrap() >= 0.0, "{line}");
    }
    assert_eq!(groups.len(), 64);
}

#[test]
fn export_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    short_train(
        "mdp1",
        "0",
        &run,
        &["--total_timesteps", "600", "--eval_interval", "600"],
    );
    let ck = run.join("checkpoint.json");
    let out = dir.path().join("e");
    // mdp1 weights read against the 16-state lake
    let o = nfdrl(&[
        "export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--env",
        "frozenlake",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let mut v: serde_json::Value = serde_json::from_str(&read(&ck)).unwrap();
    v["format_version"] = serde_json::Value::from(99);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = nfdrl(&[
        "export",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    v["format_version"] = serde_json::Value::from(1);
    v["tensors"][0]["shape"] = serde_json::json!([1, 1]);
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = nfdrl(&[
        "export",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("distributions.csv").exists());
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    short_train("mdp2", "3", &run, &[]);
    let ck = run.join("checkpoint.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = nfdrl(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(read(&a.join("eval.csv")), read(&b.join("eval.csv")));
    assert_eq!(read(&a.join("eval.csv")).lines().count(), 2);
}

#[test]
fn both_losses_complete_on_mdp2() {
    let dir = tempfile::tempdir().unwrap();
    for loss in ["exact", "surrogate"] {
        let out = dir.path().join(loss);
        let o = short_train("mdp2", "0", &out, &["--loss", loss]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let cfg: serde_json::Value = serde_json::from_str(&read(&out.join("config.json"))).unwrap();
        assert_eq!(cfg["loss_kind"], loss);
        for line in read(&out.join("metrics.csv")).lines().skip(1) {
            assert!(
                line.split(',').all(|f| f.parse::<f64>().is_ok_and(f64::is_finite)),
                "{line}"
            );
        }
    }
}

#[test]
fn overrides_only_apply_to_train() {
    let o = nfdrl(&["props", "--learning_rate", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(nfdrl(&["frobnicate"]).status.code(), Some(2));
}
