//! CLI behavior: exit codes, index lifecycle, report edge cases, and the
//! evaluate command's re-scoring contract.

use psa_core::config::PipelineConfig;
use psa_core::domain::{Category, PhysicsQuestion};
use psa_core::gateway::{Gateway, RetryPolicy};
use psa_core::pipeline::{Pipeline, RunOptions};
use psa_core::reporting;
use psa_testkit::{fixture_config, ScriptedModel};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_psa"))
        .args(args)
        .output()
        .expect("run psa");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cassette: PathBuf,
    config_file: PathBuf,
    question_file: PathBuf,
    record_run_dir: PathBuf,
    record_csv: PathBuf,
}

const QUESTION: &str =
    "A ball is dropped from a height of 20 m. How long does it take to reach the ground? Take g = 10 m/s^2.";

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let record_out = dir.path().join("record_out");
    let config = fixture_config(&tools_dir, &record_out);
    let cassette = dir.path().join("cassette.jsonl");
    let question = PhysicsQuestion::new(None, QUESTION, Category::Easy);
    let run_dir;
    {
        let gateway = Gateway::record(
            &cassette,
            Box::new(ScriptedModel::new(6)),
            RetryPolicy::default(),
        )
        .unwrap();
        let pipeline = Pipeline {
            gateway: &gateway,
            config: &config,
            rag: None,
        };
        let outcome = pipeline
            .run(&question, &RunOptions::default())
            .map_err(|f| f.error.to_string())
            .unwrap();
        run_dir = outcome.run_dir;
    }
    let config_file = dir.path().join("config.toml");
    fs::write(&config_file, toml::to_string_pretty(&config).unwrap()).unwrap();
    let question_file = dir.path().join("question.txt");
    fs::write(&question_file, QUESTION).unwrap();
    Fixture {
        root: dir.path().to_path_buf(),
        _dir: dir,
        cassette,
        config_file,
        question_file,
        record_run_dir: run_dir,
        record_csv: record_out.join("results.csv"),
    }
}

fn generate_args<'a>(
    f: &'a Fixture,
    out: &'a Path,
    csv: &'a Path,
    extra: &[&'a str],
) -> Vec<String> {
    let mut args: Vec<String> = [
        "generate",
        "--question-file",
        f.question_file.to_str().unwrap(),
        "--category",
        "easy",
        "--out",
        out.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--cassette",
        "replay",
        "--cassette-file",
        f.cassette.to_str().unwrap(),
        "--config",
        f.config_file.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn generate_replay_and_skip_refine_row_counts() {
    let f = fixture();
    let out = f.root.join("replay_full");
    let csv = out.join("results.csv");
    let args = generate_args(&f, &out, &csv, &[]);
    let (code, stdout, stderr) = run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("v1"));
    assert!(stdout.contains("v2"));
    assert_eq!(reporting::raw_rows(&csv).unwrap().len(), 2);

    let out2 = f.root.join("replay_skip");
    let csv2 = out2.join("results.csv");
    let args = generate_args(&f, &out2, &csv2, &["--skip-refine"]);
    let (code, _stdout, stderr) = run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 0, "stderr: {stderr}");
    let rows = reporting::raw_rows(&csv2).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][2], "v1");
}

#[test]
fn generate_missing_question_file_is_usage_error() {
    let f = fixture();
    let out = f.root.join("x");
    let (code, _stdout, stderr) = run_cli(&[
        "generate",
        "--question-file",
        "/nonexistent/question.txt",
        "--category",
        "easy",
        "--out",
        out.to_str().unwrap(),
        "--cassette",
        "replay",
        "--cassette-file",
        f.cassette.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("usage"), "stderr: {stderr}");
}

#[test]
fn generate_unknown_category_is_usage_error() {
    let f = fixture();
    let (code, _stdout, stderr) = run_cli(&[
        "generate",
        "--question-file",
        f.question_file.to_str().unwrap(),
        "--category",
        "extreme",
        "--cassette",
        "replay",
        "--cassette-file",
        f.cassette.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("unknown category"));
}

#[test]
fn generate_cassette_miss_fails_with_failure_row() {
    let f = fixture();
    // Empty cassette: the very first solve call misses.
    let empty = f.root.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = f.root.join("miss_out");
    let csv = out.join("results.csv");
    fs::create_dir_all(&out).unwrap();
    let (code, _stdout, stderr) = run_cli(&[
        "generate",
        "--question-file",
        f.question_file.to_str().unwrap(),
        "--category",
        "easy",
        "--out",
        out.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--cassette",
        "replay",
        "--cassette-file",
        empty.to_str().unwrap(),
        "--config",
        f.config_file.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("cassette miss"), "stderr: {stderr}");
    assert!(
        stderr.contains("solution"),
        "miss should name the template: {stderr}"
    );
    let rows = reporting::raw_rows(&csv).unwrap();
    assert_eq!(rows.len(), 1);
    let flags_col = reporting::csv_columns()
        .iter()
        .position(|c| *c == "flags")
        .unwrap();
    assert!(rows[0][flags_col].contains("failed:solve"));
}

#[test]
fn evaluate_rewrites_identical_rows_for_untouched_runs() {
    let f = fixture();
    let before = reporting::raw_rows(&f.record_csv).unwrap();
    let (code, stdout, stderr) = run_cli(&[
        "evaluate",
        "--run-dir",
        f.record_run_dir.to_str().unwrap(),
        "--csv",
        f.record_csv.to_str().unwrap(),
        "--cassette",
        "replay",
        "--cassette-file",
        f.cassette.to_str().unwrap(),
        "--config",
        f.config_file.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("rewritten"));
    let after = reporting::raw_rows(&f.record_csv).unwrap();
    assert_eq!(before, after, "untouched run must re-score identically");
}

#[test]
fn evaluate_missing_screenshots_exits_one() {
    let f = fixture();
    for entry in fs::read_dir(f.record_run_dir.join("v1/screenshots"))
        .unwrap()
        .flatten()
    {
        fs::remove_file(entry.path()).unwrap();
    }
    let (code, _stdout, stderr) = run_cli(&[
        "evaluate",
        "--run-dir",
        f.record_run_dir.to_str().unwrap(),
        "--csv",
        f.record_csv.to_str().unwrap(),
        "--cassette",
        "replay",
        "--cassette-file",
        f.cassette.to_str().unwrap(),
        "--config",
        f.config_file.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("missing screenshot"), "stderr: {stderr}");
}

#[test]
fn evaluate_missing_run_dir_exits_one() {
    let f = fixture();
    let (code, _stdout, stderr) = run_cli(&[
        "evaluate",
        "--run-dir",
        "/nonexistent/run",
        "--cassette",
        "replay",
        "--cassette-file",
        f.cassette.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("incomplete run directory"));
}

#[test]
fn index_builds_counts_and_rejects_empty() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs");
    fs::create_dir_all(&docs).unwrap();
    for (name, text) in [
        ("a.md", "Arrow and Vector draw force arrows in scenes."),
        ("b.md", "MathTex renders LaTeX equations for formulas."),
        ("c.txt", "MoveAlongPath animates a dot along a curve."),
    ] {
        fs::write(docs.join(name), text).unwrap();
    }
    let index_dir = dir.path().join("index");
    let (code, stdout, _stderr) = run_cli(&[
        "index",
        "--docs-dir",
        docs.to_str().unwrap(),
        "--out",
        index_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("indexed 3 chunks"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let (code, _stdout, stderr) = run_cli(&[
        "index",
        "--docs-dir",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("index2").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("no indexable text"));
}

#[test]
fn index_rebuild_replaces_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs");
    fs::create_dir_all(&docs).unwrap();
    fs::write(docs.join("a.md"), "first corpus about arrows and vectors").unwrap();
    let index_dir = dir.path().join("index");
    let (code, ..) = run_cli(&[
        "index",
        "--docs-dir",
        docs.to_str().unwrap(),
        "--out",
        index_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let manifest_a = fs::read(index_dir.join("manifest.json")).unwrap();

    fs::write(docs.join("b.md"), "second corpus about axes and graphs").unwrap();
    let (code, ..) = run_cli(&[
        "index",
        "--docs-dir",
        docs.to_str().unwrap(),
        "--out",
        index_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let manifest_b = fs::read(index_dir.join("manifest.json")).unwrap();
    assert_ne!(manifest_a, manifest_b, "rebuild must replace the manifest");
    assert!(
        !index_dir.with_extension("tmp-index").exists(),
        "no temp dir left behind"
    );
    // The rebuilt index is immediately loadable.
    psa_core::rag::RagIndex::load(
        &index_dir,
        Box::new(psa_core::rag::HashedBagOfWords::default()),
    )
    .unwrap();
}

#[test]
fn report_handles_empty_csv_and_bad_path() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    let header: Vec<String> = reporting::csv_columns()
        .iter()
        .map(|s| s.to_string())
        .collect();
    fs::write(&csv, format!("{}\n", header.join(","))).unwrap();
    let (code, stdout, _stderr) = run_cli(&["report", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 1, "header only: {stdout}");

    let (code, _stdout, stderr) = run_cli(&["report", "--csv", "/nonexistent/results.csv"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("csv not found"));
}

#[test]
fn report_json_output_parses() {
    let f = fixture();
    let (code, stdout, _stderr) = run_cli(&[
        "report",
        "--csv",
        f.record_csv.to_str().unwrap(),
        "--version",
        "v2",
        "--json",
    ]);
    assert_eq!(code, 0);
    let parsed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(parsed[0]["category"], "Easy");
    assert_eq!(parsed[0]["count"], 1);
}

#[test]
fn config_file_drives_pipeline_defaults() {
    // A config with unknown keys should fail loudly rather than silently
    // misconfigure a run.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[models.solver]\nmodle = \"typo\"\n").unwrap();
    let err = PipelineConfig::load(&bad).unwrap_err();
    assert!(err.to_string().contains("modle") || err.to_string().contains("unknown"));
}
