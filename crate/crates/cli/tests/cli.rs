use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atomrag::kb::{load, validate_kb_integrity};

fn atomrag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atomrag"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

const SYNTH_CONFIG: &str = r#"
[gateway]
synthetic = "gold"

[synthetic]
seed = 5
hop_counts = [1, 2, 3]
"#;

fn synthetic_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SYNTH_CONFIG).unwrap();
    let o = atomrag(dir.path(), &["--config", "run.toml", "synth"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "ingest", "--corpus", "out/synthetic/corpus.jsonl"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn questions(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("out/synthetic/questions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn empty_corpus_dir_fails_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("corpus")).unwrap();
    fs::write(dir.path().join("run.toml"), SYNTH_CONFIG).unwrap();
    let o = atomrag(dir.path(), &["--config", "run.toml", "ingest", "--corpus", "corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "usage");
}

#[test]
fn synthetic_archive_loads_and_validates() {
    let dir = synthetic_workspace();
    let kb = load(dir.path().join("out/kb.atomrag")).unwrap();
    assert!(validate_kb_integrity(&kb).is_empty());
    assert_eq!(kb.counts().documents, 12);
}

#[test]
fn reingest_replaces_in_place() {
    let dir = synthetic_workspace();
    let before = load(dir.path().join("out/kb.atomrag")).unwrap();
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "ingest", "--corpus", "out/synthetic/corpus.jsonl"],
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("replaced=12"));
    let after = load(dir.path().join("out/kb.atomrag")).unwrap();
    assert_eq!(before.counts(), after.counts());
}

#[test]
fn decompose_prints_gold_answer_and_writes_transcript() {
    let dir = synthetic_workspace();
    for q in questions(dir.path()) {
        let o = atomrag(
            dir.path(),
            &[
                "--config",
                "run.toml",
                "solve",
                "--method",
                "decompose",
                "--kb",
                "out/kb.atomrag",
                "--question",
                q["question"].as_str().unwrap(),
            ],
        );
        assert!(o.status.success());
        assert_eq!(stdout(&o).trim(), q["gold_answers"][0].as_str().unwrap());
        let t: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("out/transcript.json")).unwrap()).unwrap();
        assert!(!t["transcript"].as_array().unwrap().is_empty());
    }
}

#[test]
fn solve_defaults_to_the_ingested_archive() {
    let dir = synthetic_workspace();
    let q = &questions(dir.path())[0];
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "solve", "--method", "decompose", "--question", q["question"].as_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), q["gold_answers"][0].as_str().unwrap());
}

const SCRIPT: &str = r#"{
  "entries": [
    {"tag": "cot", "contains": ["capital of France"], "response": "Paris is the capital.\nAnswer: Paris"},
    {"tag": "cot", "response": "Answer: unknown"}
  ]
}"#;

const RECORDS: &str = r#"{"id": "r1", "question": "What is the capital of France?", "gold_answers": ["Paris"], "metadata": {"type": "bridge"}}
{"id": "r2", "question": "Who wrote Hamlet?", "gold_answers": ["Shakespeare"], "metadata": {"type": "bridge"}}
{"id": "r3", "question": "Which is larger, 2 or 3?", "gold_answers": ["3"], "metadata": {"type": "comparison"}}
"#;

fn scripted_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("script.json"), SCRIPT).unwrap();
    fs::write(dir.path().join("qa.jsonl"), RECORDS).unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "[gateway]\nmock_script = \"script.json\"\n",
    )
    .unwrap();
    dir
}

#[test]
fn cot_runs_without_a_kb() {
    let dir = scripted_workspace();
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "solve", "--method", "cot", "--question", "What is the capital of France?"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "Paris");
}

#[test]
fn retrieval_method_without_kb_is_a_usage_error() {
    let dir = scripted_workspace();
    let o = atomrag(dir.path(), &["--config", "run.toml", "solve", "--method", "naive", "--question", "q"]);
    assert_eq!(o.status.code(), Some(1));
    let o = atomrag(dir.path(), &["--config", "run.toml", "solve", "--method", "nope", "--question", "q"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_writes_one_row_per_record() {
    let dir = scripted_workspace();
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "eval", "--benchmark", "qa.jsonl", "--format", "records", "--method", "cot"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval-records-cot.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert_eq!(report["by_type"]["bridge"]["count"], 2);
    let em = report["overall"]["em"].as_f64().unwrap();
    assert!((em - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn eval_sampling_is_reproducible_and_bounded() {
    let dir = scripted_workspace();
    let args = |n: &str| {
        vec![
            "--config", "run.toml", "eval", "--benchmark", "qa.jsonl", "--format", "records", "--method", "cot",
            "--sample", n, "--seed", "9",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    let run = |n: &str| {
        let a = args(n);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        let o = atomrag(dir.path(), &refs);
        (o.status.code(), fs::read(dir.path().join("out/eval-records-cot.json")).ok())
    };
    let (c1, r1) = run("2");
    let (c2, r2) = run("2");
    assert_eq!((c1, c2), (Some(0), Some(0)));
    assert_eq!(r1, r2);
    assert_eq!(run("4").0, Some(1));
}

#[test]
fn collect_then_export_follows_pair_rule() {
    let dir = synthetic_workspace();
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "collect", "--qa", "out/synthetic/questions.jsonl", "--kb", "out/kb.atomrag"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("kept_fraction=1.0000"));
    let o = atomrag(
        dir.path(),
        &["--config", "run.toml", "export-sft", "--trajectories", "out/trajectories.jsonl"],
    );
    assert!(o.status.success());
    // hops 1, 2 and 3: (1+1) + (2+1) + (3+1) pairs
    let lines = fs::read_to_string(dir.path().join("out/sft.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 9);
}

#[test]
fn export_of_empty_archive_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.jsonl"), "").unwrap();
    let o = atomrag(dir.path(), &["export-sft", "--trajectories", "t.jsonl", "--out", "sft.jsonl"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("sft.jsonl")).unwrap(), "");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = synthetic_workspace();
    let b = synthetic_workspace();
    for d in [a.path(), b.path()] {
        let o = atomrag(
            d,
            &["--config", "run.toml", "eval", "--benchmark", "out/synthetic/questions.jsonl", "--format", "records",
              "--method", "decompose", "--kb", "out/kb.atomrag"],
        );
        assert!(o.status.success());
    }
    for f in ["out/kb.atomrag", "out/eval-records-decompose.json", "out/eval-records-decompose-transcripts.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_must_name_exactly_one_gateway() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[gateway]\n").unwrap();
    let o = atomrag(dir.path(), &["--config", "run.toml", "solve", "--method", "cot", "--question", "q"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o)["error"]["message"].as_str().unwrap().contains("exactly one"));
}
