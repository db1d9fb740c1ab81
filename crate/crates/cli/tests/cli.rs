use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "train.steps": 12,
  "train.eval_every": 6,
  "train.checkpoint_every": 6,
  "train.warmup_steps": 3,
  "model.label.n_prefixes": 2,
  "model.label.k_attributes": 3,
  "model.label.l_tokens": 3,
  "temporal.blocks": 2
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_openvocab"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let d = tempfile::tempdir().unwrap();
    let o = bin().current_dir(d.path()).args(["infer", "--checkpoint", "missing.ckpt", "--db", "x.db", "--video", "v"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));
    let o = bin().current_dir(d.path()).args(["gen-data", "--set", "train.stepz=3"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_on_a_perfect_fixture_reports_aupr_one() {
    let d = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for (i, (s, t)) in [(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0), (0.05, 0)].iter().enumerate() {
        lines.push_str(&format!("{{\"video\":\"v{i}\",\"label\":\"l\",\"score\":{s},\"truth\":{t}}}\n"));
    }
    fs::write(d.path().join("perfect.jsonl"), lines).unwrap();
    run(d.path(), &["eval", "--scores", "perfect.jsonl", "--out", "ev"]);
    let m = json(&d.path().join("ev/metrics.json"));
    assert_eq!(m["datasets"][0]["aupr"].as_f64(), Some(1.0));
    assert_eq!(m["datasets"][0]["peak_f1"].as_f64(), Some(1.0));
    assert!(fs::read_to_string(d.path().join("ev/f1_curves.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn gen_data_is_reproducible_and_records_the_run() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), &["gen-data", "--seed", "3", "--out", "a"]);
    run(d.path(), &["gen-data", "--seed", "3", "--out", "b"]);
    for f in ["manifest.jsonl", "vocabulary.txt", "dataset.json"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
    let r = json(&d.path().join("a/run.json"));
    assert_eq!(r["command"], "gen-data");
    assert_eq!(r["seed"], 3);
    assert_eq!(r["config"]["train.seed"], 3);
    assert_eq!(r["source_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn gradcheck_prints_every_component() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.json"), TINY).unwrap();
    let o = run(d.path(), &["gradcheck", "--config", "tiny.json", "--out", "gc"]);
    let text = stdout(&o);
    for c in ["llm_prefix", "prompt_transformer", "temporal_attention", "proj_spatial"] {
        assert!(text.contains(c), "{text}");
    }
    let rows = json(&d.path().join("gc/gradcheck.json"));
    assert!(rows.as_array().unwrap().iter().all(|r| r["max_rel_error"].as_f64().unwrap() < 1e-3));
}

#[test]
fn train_expand_infer_eval_calibrate() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.json"), TINY).unwrap();
    run(p, &["gen-data", "--config", "tiny.json", "--out", "data"]);
    run(p, &["train", "--config", "tiny.json", "--data", "data", "--out", "run"]);
    for f in ["model.ckpt", "vocab.db", "config.json", "metrics.jsonl", "run.json", "checkpoints/step_6.ckpt", "checkpoints/step_12.ckpt"] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(p.join("run/metrics.jsonl")).unwrap().lines().count(), 2);

    // The open split's synonyms are not in the trained database until expanded.
    let o = bin().current_dir(p).args(["eval", "--checkpoint", "run/model.ckpt", "--db", "run/vocab.db", "--split", "test_open", "--data", "data"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expand-vocab"));
    let o = run(p, &["expand-vocab", "--checkpoint", "run/model.ckpt", "--db", "run/vocab.db", "--split", "test_open", "--data", "data", "--out", "exp"]);
    assert!(stdout(&o).contains("(16 new)"), "{}", stdout(&o));

    run(p, &["infer", "--checkpoint", "run/model.ckpt", "--db", "exp/vocab.db", "--video", "test_open-0000", "--data", "data", "--threshold", "-1", "--out", "inf"]);
    let inf = json(&p.join("inf/inference.json"));
    assert_eq!(inf["video_id"], "test_open-0000");
    assert_eq!(inf["scores"].as_array().unwrap().len(), 32);
    assert_eq!(inf["predicted"].as_array().unwrap().len(), 32);

    // Eval is a pure function of checkpoint, database and manifest.
    let args = |out: &'static str| ["eval", "--checkpoint", "run/model.ckpt", "--db", "exp/vocab.db", "--split", "val", "test_closed", "test_open", "--data", "data", "--out", out];
    run(p, &args("ev1"));
    run(p, &args("ev2"));
    for f in ["metrics.json", "scores_val.jsonl", "scores_test_open.jsonl"] {
        assert_eq!(fs::read(p.join("ev1").join(f)).unwrap(), fs::read(p.join("ev2").join(f)).unwrap(), "{f}");
    }

    run(p, &["calibrate", "--val", "ev1/scores_val.jsonl", "ev1/scores_test_closed.jsonl", "--apply", "ev1/scores_test_open.jsonl", "--out", "cal"]);
    let t = json(&p.join("cal/threshold.json"));
    assert!(t["selection"]["threshold"].as_f64().unwrap().is_finite());
    assert_eq!(t["applied"].as_array().unwrap().len(), 1);
    assert!(p.join("cal/f1_curves.svg").is_file());
    run(p, &["plot", "--scores", "ev1/scores_val.jsonl", "--threshold", "0.0", "--out", "pl"]);
    assert!(p.join("pl/f1_curves.svg").is_file());
}

#[test]
fn pipeline_stages_rerun_identically_from_intermediates() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["pipeline", "all", "--out", "full"]);
    for f in ["captions.jsonl", "concepts.jsonl", "vocab.jsonl", "assignments.jsonl", "merged/manifest.jsonl"] {
        assert!(p.join("full").join(f).is_file(), "{f}");
    }
    for (stage, file) in [("extract", "concepts.jsonl"), ("dedup", "vocab.jsonl"), ("assign", "assignments.jsonl")] {
        run(p, &["pipeline", stage, "--from", "full", "--out", "again"]);
        assert_eq!(fs::read(p.join("full").join(file)).unwrap(), fs::read(p.join("again").join(file)).unwrap(), "{stage}");
    }
}
