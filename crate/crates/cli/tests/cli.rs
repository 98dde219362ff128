use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn apl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apl")).args(args).output().unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn err_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small data set and base policy shared by the tests in this file.
fn fixture() -> &'static (PathBuf, PathBuf) {
    static F: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("apl-cli-{}", std::process::id()));
        let data = root.join("data");
        let base = root.join("base.aplm");
        let o = apl(&[
            "gen-data", "--out", s(&data), "--seed", "3", "--corpus-size", "300", "--pool-size", "200", "--eval-size", "96",
        ]);
        assert_eq!(ok_json(&o)["eval"], 96);
        let o = apl(&[
            "pretrain", "--data", s(&data), "--out", s(&base), "--epochs", "3", "--context", "3", "--embed", "8", "--hidden", "16",
        ]);
        assert!(ok_json(&o)["mean_nll"].as_f64().unwrap() < (16f64).ln());
        (data, base)
    })
}

fn small_config(dir: &Path) -> PathBuf {
    let (data, base) = fixture();
    let cfg = json!({
        "budget": 32, "batch": 16, "pool": 32, "oversample": 2, "mc_samples": 2,
        "eval_waypoints": [0, 16, 32], "eval_prompts": 48,
        "dpo": {"epochs": 2, "minibatch": 8, "lr": 0.005},
        "data_dir": data, "base_checkpoint": base,
    });
    let p = dir.join("c.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(apl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(apl(&["run", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(apl(&["run", "--out", "x", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(apl(&["analyze", "--out", "x"]).status.code(), Some(2));
    assert_eq!(apl(&["--help"]).status.code(), Some(0));
}

#[test]
fn batch_larger_than_budget_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"budget": 32, "batch": 64}"#).unwrap();
    let out = apl(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let e = err_json(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["field"], "batch");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("batch M exceeds budget B") && msg.contains("M=64, B=32"), "{e}");
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn config_type_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"dpo": {"epochs": -3}}"#).unwrap();
    let e = err_json(&apl(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]));
    assert_eq!(e["field"], "dpo.epochs");
    std::fs::write(&cfg, r#"{"beta": 0}"#).unwrap();
    let e = err_json(&apl(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]));
    assert_eq!(e["field"], "beta");
}

#[test]
fn llm_oracle_without_endpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = apl(&["run", "--config", s(&cfg), "--oracle", "llm", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(err_json(&out)["field"], "judge");
}

#[test]
fn non_loopback_bind_needs_opt_in() {
    let out = apl(&["serve", "--addr", "0.0.0.0:0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(err_json(&out)["field"], "addr");
}

#[test]
fn runs_are_reproducible_and_analyzable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut dirs = Vec::new();
    for strategy in ["random", "certainty"] {
        for seed in ["1", "2"] {
            let dir = tmp.path().join(format!("{strategy}-{seed}"));
            let o = apl(&["run", "--config", s(&cfg), "--strategy", strategy, "--seed", seed, "--out", s(&dir)]);
            let summary = ok_json(&o);
            assert_eq!(summary["steps"], 2);
            assert_eq!(summary["label_calls"], 32);
            assert_eq!(summary["final_size"], 32);
            dirs.push(dir);
        }
    }
    let frozen: Value = serde_json::from_slice(&std::fs::read(dirs[3].join("config.json")).unwrap()).unwrap();
    assert_eq!(frozen["strategy"], "certainty");
    assert_eq!(frozen["seed"], 2);
    assert_eq!(frozen["budget"], 32);
    for f in ["metrics.csv", "prefs.jsonl", "judgements.jsonl", "final/params.aplm", "checkpoints/step-2/state.json"] {
        assert!(dirs[0].join(f).is_file(), "missing {f}");
    }

    let again = tmp.path().join("again");
    ok_json(&apl(&["run", "--config", s(&cfg), "--strategy", "certainty", "--seed", "2", "--out", s(&again)]));
    assert_eq!(tree(&dirs[3]), tree(&again));

    let refused = apl(&["run", "--config", s(&cfg), "--out", s(&again)]);
    assert_eq!(refused.status.code(), Some(1));

    let out = tmp.path().join("analysis");
    let mut args = vec!["analyze", "--out", s(&out), "--min-step", "1"];
    args.extend(dirs.iter().map(|d| s(d)));
    let o = apl(&args);
    let summary = ok_json(&o);
    assert_eq!(summary["runs"], 4);
    let table = std::fs::read_to_string(out.join("table2-style.txt")).unwrap();
    assert!(table.contains("random") && table.contains("certainty"), "{table}");
    assert!(table.contains('±'), "{table}");
    for f in ["summary.csv", "histogram.csv", "confidence.csv", "figures/winrate.svg", "figures/histogram-certainty.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let (data, base) = fixture();
    let tuned = dirs[3].join("final/params.aplm");
    let e = ok_json(&apl(&[
        "eval", "--checkpoint", s(&tuned), "--base", s(base), "--data", s(data), "--prompts", "48", "--seed", "4",
    ]));
    assert_eq!(e["n"], 48);
    let rate = e["rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let self_eval = ok_json(&apl(&[
        "eval", "--checkpoint", s(base), "--base", s(base), "--data", s(data), "--prompts", "48", "--temperature", "0",
    ]));
    assert_eq!(self_eval["rate"], 0.5);
}

#[test]
fn resume_continues_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let full = tmp.path().join("full");
    ok_json(&apl(&["run", "--config", s(&cfg), "--seed", "9", "--out", s(&full)]));
    let part = tmp.path().join("part");
    ok_json(&apl(&["run", "--config", s(&cfg), "--seed", "9", "--out", s(&part)]));
    std::fs::remove_dir_all(part.join("checkpoints/step-2")).unwrap();
    std::fs::remove_dir_all(part.join("final")).unwrap();
    let o = ok_json(&apl(&["run", "--config", s(&cfg), "--seed", "9", "--out", s(&part), "--resume"]));
    assert_eq!(o["steps"], 2);
    for f in ["metrics.csv", "prefs.jsonl", "final/params.aplm"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn valence_consistency_is_perfect() {
    let (data, base) = fixture();
    let o = ok_json(&apl(&["consistency", "--data", s(data), "--base", s(base), "--pairs", "60", "--repeats", "4"]));
    assert_eq!(o["oracle"], "valence");
    assert_eq!(o["report"]["consistency"], 1.0);
    assert_eq!(o["report"]["evaluated"], 60);
}

#[test]
fn serve_labels_a_human_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run_dir = tmp.path().join("human");
    let mut child = Command::new(env!("CARGO_BIN_EXE_apl"))
        .args(["serve", "--config", s(&cfg), "--seed", "5", "--addr", "127.0.0.1:0", "--out", s(&run_dir)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let base = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(base.starts_with("http://127.0.0.1:"), "{line}");

    let client = reqwest::blocking::Client::new();
    let mut labelled = 0;
    let deadline = Instant::now() + Duration::from_secs(120);
    while labelled < 32 {
        assert!(Instant::now() < deadline, "timed out with {labelled} labels");
        let items: Vec<Value> = client.get(format!("{base}/api/pending")).send().unwrap().json().unwrap();
        if items.is_empty() {
            std::thread::sleep(Duration::from_millis(20));
            continue;
        }
        for it in items {
            let r = client
                .post(format!("{base}/api/judgements"))
                .json(&json!({"id": it["id"], "preferred": "A"}))
                .send()
                .unwrap();
            assert_eq!(r.status(), 200);
            labelled += 1;
        }
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["label_calls"], 32);
    let judged = std::fs::read_to_string(run_dir.join("judgements.jsonl")).unwrap();
    for l in judged.lines() {
        let j: Value = serde_json::from_str(l).unwrap();
        assert_eq!(j["oracle_id"], "human");
        assert_eq!(j["raw_choice"], "A");
        let won_slot_a = j["presented_order"][0] == j["winner_index"];
        assert!(won_slot_a, "{j}");
    }
}
