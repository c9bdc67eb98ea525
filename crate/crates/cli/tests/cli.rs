use std::path::Path;
use std::process::{Command, Output};

fn edu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edu")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "seed": 3,
  "cohort": {
    "n_students": 10, "n_concepts": 12, "n_questions": 60,
    "interactions_per_student": {"min": 12, "max": 14}, "window": 6
  },
  "model": {"encoder_hidden": 16, "lm_hidden": 16, "max_history": 6, "max_text_tokens": 160},
  "train": {"steps": 4, "batch_histories": 2, "warmup_steps": 1, "lr": 0.001},
  "eval_limit": 3,
  "checkpoint_every": 2
}"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn golden_vram_passes() {
    let o = edu(&["vram", "--golden"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("golden: PASS"));
    assert!(text.contains("training total ratio  3.29x"));
}

#[test]
fn zero_length_shape_has_no_activations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("shape.json");
    std::fs::write(
        &p,
        r#"{"a": 12, "b": 1, "d": 1536, "l": 28, "s": 0, "t": 1, "v": 151936,
            "n_params": 2000000000, "stage": "train", "flash": true}"#,
    )
    .unwrap();
    let o = edu(&["vram", "--csv", "--shapes", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row = text.lines().nth(1).unwrap();
    assert_eq!(row, "Train,shape,16000000000,0,0,0,16000000000");
}

#[test]
fn bad_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"seed": 1, "unknown_field": true}"#).unwrap();
    assert_eq!(edu(&["simulate", "--config", p.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(edu(&["vram", "--shapes", "/nonexistent.json"]).status.code(), Some(1));
    let out = dir.path().join("out");
    assert_eq!(edu(&["eval", "--out", out.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(edu(&["simulate", "--k", "7"]).status.code(), Some(1));
}

#[test]
fn config_prints_resolved_json() {
    let o = edu(&["config", "--seed", "9", "--task", "trace,answer"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["cohort"]["seed"], 9);
    assert_eq!(v["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |out: &str, args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--config", &cfg, "--out", out]);
        let o = edu(&all);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());

    let stats = run(a, &["simulate"]);
    assert_eq!(stats.lines().count(), 5);
    run(b, &["simulate"]);
    let read = |root: &str, f: &str| std::fs::read(Path::new(root).join(f)).unwrap();
    assert_eq!(read(a, "data/cohort.jsonl"), read(b, "data/cohort.jsonl"));

    let built = run(a, &["build-tasks"]);
    assert!(built.contains("0 violations"));
    assert!(run(a, &["train"]).contains("trained 4 steps"));
    let report = run(a, &["eval", "--k", "5"]);
    assert!(report.contains("P@1 K=5"));
    assert!(!report.contains("K=10"));
    let json: serde_json::Value = serde_json::from_slice(&read(a, "eval/report.json")).unwrap();
    assert_eq!(json["trace"]["n"], 3);
    let manifest: serde_json::Value = serde_json::from_slice(&read(a, "manifests/eval.json")).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["ks"], serde_json::json!([5]));

    let sweep = run(a, &["sweep", "--m", "1,2", "--task", "trace"]);
    assert_eq!(sweep.lines().count(), 3);
    let rows: serde_json::Value = serde_json::from_slice(&read(a, "sweep/report.json")).unwrap();
    let rows = rows.as_array().unwrap();
    // block activations scale linearly in m
    let blocks: Vec<u64> = rows.iter().map(|r| r["blocks_bytes"].as_u64().unwrap()).collect();
    assert_eq!(blocks[1], 2 * blocks[0]);
}
