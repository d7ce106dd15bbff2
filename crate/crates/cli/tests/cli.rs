use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kilab"))
        .args(args)
        .env_remove("KILAB_API_TOKEN")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Vec<Value> {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// The single structured error line of a failed run.
fn error_of(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["error"]["message"].is_string());
    v["error"].clone()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "train": {"embed_dim": 8, "epochs": 2, "batch_size": 16},
        "n_train": 48,
        "n_eval": 30,
        "seeds": [0, 1],
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_kb_reports_counts() {
    let out = stdout_json(&kilab(&["validate-kb"]));
    assert_eq!(out[0]["ok"], true);
    assert_eq!(out[0]["diseases"], 11);
}

#[test]
fn invalid_kb_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("kb.json");
    std::fs::write(
        &bad,
        r#"{"phenotypes": [{"id": "edema", "display_name": "edema"}],
            "diseases": [{"id": "d", "display_name": "D", "typical": ["edema"], "excluded": ["edema"]}]}"#,
    )
    .unwrap();
    let err = error_of(&kilab(&["validate-kb", "--kb", s(&bad)]));
    assert_eq!(err["kind"], "validation");
    let missing = error_of(&kilab(&["validate-kb", "--kb", "/no/such/kb.json"]));
    assert_eq!(missing["kind"], "io");
}

#[test]
fn usage_errors_are_structured() {
    let err = error_of(&kilab(&["gen-captions", "--granularity", "ultra"]));
    assert_eq!(err["kind"], "usage");
    let err = error_of(&kilab(&["no-such-command"]));
    assert_eq!(err["kind"], "usage");
    assert!(kilab(&["--help"]).status.success());
}

#[test]
fn experiment_requires_an_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let err = error_of(&kilab(&["experiment", "--config", &cfg]));
    assert_eq!(err["kind"], "config");
}

#[test]
fn gen_captions_writes_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("caps");
    let lines = stdout_json(&kilab(&[
        "gen-captions",
        "--granularity",
        "fine",
        "--n",
        "5",
        "--seed",
        "3",
        "--out",
        s(&out),
        "--paraphrase",
        "mock",
    ]));
    assert_eq!(lines[0]["records"], 5);
    assert_eq!(lines[0]["paraphrase_failures"], 0);
    let corpus = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 5);
    for line in corpus.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["granularity"], "fine");
    }
    assert_eq!(
        std::fs::read_to_string(out.join("dataset.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let model = dir.path().join("model");
    let trained = stdout_json(&kilab(&[
        "train",
        "--config",
        &cfg,
        "--granularity",
        "fine",
        "--seed",
        "2",
        "--out",
        s(&model),
    ]));
    assert_eq!(trained[0]["examples"], 48);
    assert_eq!(trained[0]["epochs"], 2);
    for f in [
        "checkpoint.json",
        "vocab.txt",
        "loss.csv",
        "corpus.jsonl",
        "train_config.json",
    ] {
        assert!(model.join(f).exists(), "{f}");
    }

    // retrain from the written corpus and dataset: same model
    let again = dir.path().join("again");
    stdout_json(&kilab(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "2",
        "--out",
        s(&again),
        "--dataset",
        s(&model.join("dataset.jsonl")),
        "--corpus",
        s(&model.join("corpus.jsonl")),
    ]));
    assert_eq!(
        std::fs::read(model.join("checkpoint.json")).unwrap(),
        std::fs::read(again.join("checkpoint.json")).unwrap()
    );

    let eval = stdout_json(&kilab(&[
        "eval",
        "--config",
        &cfg,
        "--seed",
        "2",
        "--model",
        s(&model),
    ]));
    assert_eq!(eval[0]["n_examples"], 30);
    assert_eq!(eval[0]["per_class"].as_object().unwrap().len(), 11);
    let csv = std::fs::read_to_string(model.join("eval.csv")).unwrap();
    assert!(csv.starts_with("class,accuracy\nA,"));
    assert_eq!(csv.lines().count(), 1 + 11 + 1);

    let missing = error_of(&kilab(&["eval", "--model", s(&dir.path().join("nope"))]));
    assert_eq!(missing["kind"], "io");
}

#[test]
fn experiment_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let lines = stdout_json(&kilab(&["experiment", "--config", &cfg, "--out", s(&a)]));
    stdout_json(&kilab(&["experiment", "--config", &cfg, "--out", s(&b)]));
    // three arms and three comparisons
    assert_eq!(lines.len(), 6);
    for f in ["report.csv", "report.md", "manifest.json", "ttests.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let before = std::fs::read(a.join("report.csv")).unwrap();
    std::fs::remove_file(a.join("report.csv")).unwrap();
    let written = stdout_json(&kilab(&["report", "--out", s(&a), "--format", "csv"]));
    assert_eq!(written[0]["written"].as_array().unwrap().len(), 1);
    assert_eq!(std::fs::read(a.join("report.csv")).unwrap(), before);

    let err = error_of(&kilab(&["report", "--out", s(&a), "--format", "pdf"]));
    assert_eq!(err["kind"], "config");
}

#[test]
fn experiment_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("one");
    let lines = stdout_json(&kilab(&[
        "experiment",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--seed",
        "4",
        "--granularity",
        "coarse",
    ]));
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["arm"], "coarse");
    assert_eq!(lines[0]["per_seed"].as_array().unwrap().len(), 1);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
