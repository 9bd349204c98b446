use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tirlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tirlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("TIRLAB_STEPS")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_writes_metrics_policy_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tirlab(&["train", "--steps", "10", "--output-dir", "a"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = tmp.path().join("a");
    assert_eq!(lines(&dir.join("metrics.jsonl")).len(), 10);
    let policy: Value = serde_json::from_str(&fs::read_to_string(dir.join("policy.json")).unwrap()).unwrap();
    assert!(policy["logits"].as_array().unwrap().len() > 100);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));

    // rerun from the written config reproduces the run byte for byte
    let config = dir.join("config.toml");
    let out = tirlab(
        &["train", "--config", config.to_str().unwrap(), "--output-dir", "b"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let b = tmp.path().join("b");
    assert_eq!(fs::read(dir.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    let manifest_b: Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_ne!(manifest["config_sha256"], manifest_b["config_sha256"], "output_dir differs");

    // seed override changes the history and is itself reproducible
    for name in ["c", "d"] {
        let out = tirlab(&["train", "--steps", "10", "--seed", "5", "--output-dir", name], tmp.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let c = fs::read(tmp.path().join("c/metrics.jsonl")).unwrap();
    assert_eq!(c, fs::read(tmp.path().join("d/metrics.jsonl")).unwrap());
    assert_ne!(c, fs::read(dir.join("metrics.jsonl")).unwrap());
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "steps = 3\nlearning_rat = 1.0\n").unwrap();
    let out = tirlab(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));

    let out = tirlab(&["train", "--set", "clip_epsilon=2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("clip_epsilon"), "{}", stderr(&out));

    let out = tirlab(&["train", "--set", "steps=lots"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("steps"), "{}", stderr(&out));
}

#[test]
fn env_overrides_file_and_flags_override_env() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "steps = 3\neval_every = 1\n").unwrap();
    let run = |extra: &[&str], env: Option<&str>, dir: &str| {
        let mut args = vec!["train", "--config", "c.toml", "--output-dir", dir];
        args.extend_from_slice(extra);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tirlab"));
        cmd.args(&args).current_dir(tmp.path()).env_remove("TIRLAB_STEPS");
        if let Some(v) = env {
            cmd.env("TIRLAB_STEPS", v);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        lines(&tmp.path().join(dir).join("metrics.jsonl")).len()
    };
    assert_eq!(run(&[], None, "file"), 3);
    assert_eq!(run(&[], Some("4"), "env"), 4);
    assert_eq!(run(&["--steps", "2"], Some("4"), "flag"), 2);
}

#[test]
fn compare_writes_runs_and_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tirlab(
        &[
            "compare", "--algorithms", "grpo,vspo", "--seeds", "0,1,2", "--steps", "10", "--output-dir", "cmp",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = tmp.path().join("cmp");
    let runs: Vec<_> = fs::read_dir(dir.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 6);
    for entry in runs {
        let path = entry.unwrap().path();
        assert_eq!(lines(&path.join("metrics.jsonl")).len(), 10);
        assert!(path.join("manifest.json").exists());
    }
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 3, "{summary}");
    assert!(rows[0].starts_with("algorithm,reward,runs,final_eval_reward"));
    assert!(rows[0].contains("steps_to_plateau"));
    assert_eq!(fs::read_to_string(dir.join("runs.csv")).unwrap().lines().count(), 7);
    assert!(fs::read_to_string(dir.join("report.txt")).unwrap().contains("vspo"));
}

#[test]
fn compare_rewards_reports_parse_success_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tirlab(
        &[
            "compare", "--algorithms", "vspo", "--rewards", "binary,prs-short", "--seeds", "0", "--steps", "10",
            "--parse-at", "5,10", "--output-dir", "cmp",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = fs::read_to_string(tmp.path().join("cmp/summary.csv")).unwrap();
    let header: Vec<&str> = summary.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"steps_to_parse90"));
    assert!(header.contains(&"parse_success_at_5"));
    assert!(header.contains(&"parse_success_at_10"));
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row.len(), header.len());
    let at5 = header.iter().position(|h| *h == "parse_success_at_5").unwrap();
    assert!(row[at5].parse::<f64>().is_ok(), "{summary}");
}

#[test]
fn compare_needs_two_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tirlab(&["compare", "--algorithms", "vspo", "--seeds", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn score_writes_breakdowns() {
    let tmp = tempfile::tempdir().unwrap();
    let good = "<reasoning>r</reasoning><tool_call>k1</tool_call><observation>w1 w2</observation><reasoning>r</reasoning><answer>w1 w2</answer>";
    let records = [
        serde_json::json!({"id": "a", "raw": good, "gold_answer": "w1 w2"}),
        serde_json::json!({"id": "b", "raw": "<reasoning>r<tool_call>k1", "gold_answer": "w1"}),
        serde_json::json!({"id": "c", "raw": "<reasoning>r</reasoning><tool_call>k1</tool_call>"}),
    ];
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    fs::write(tmp.path().join("t.jsonl"), text).unwrap();
    fs::write(tmp.path().join("gold.jsonl"), "{\"id\": \"c\", \"gold_answer\": \"w3\"}\n").unwrap();

    let out = tirlab(
        &["score", "--trajectories", "t.jsonl", "--gold", "gold.jsonl", "--reward", "prs-short", "-o", "s.jsonl"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let scored = lines(&tmp.path().join("s.jsonl"));
    assert_eq!(scored.len(), 3);
    assert_eq!(scored[0]["id"], "a");
    assert!((scored[0]["total"].as_f64().unwrap() - 2.1).abs() < 1e-12);
    assert_eq!(scored[1]["process"], -1.0);
    assert_eq!(scored[2]["process"], 0.0);

    // missing gold answer names the id
    let out = tirlab(&["score", "--trajectories", "t.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("`c`"), "{}", stderr(&out));

    // malformed JSONL names the line
    fs::write(tmp.path().join("bad.jsonl"), format!("{}\nnot json\n", records[0])).unwrap();
    let out = tirlab(&["score", "--trajectories", "bad.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn generated_tasks_feed_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tirlab(&["gen-tasks", "--seed", "3", "--output-dir", "tasks"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(lines(&tmp.path().join("tasks/train.jsonl")).len(), 50);
    assert_eq!(lines(&tmp.path().join("tasks/eval.jsonl")).len(), 20);

    let out = tirlab(
        &[
            "train", "--steps", "4", "--set", "tasks=tasks/train.jsonl", "--set", "eval_tasks=tasks/eval.jsonl",
            "--output-dir", "run",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(lines(&tmp.path().join("run/metrics.jsonl")).len(), 4);

    let out = tirlab(&["train", "--set", "tasks=missing.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}
