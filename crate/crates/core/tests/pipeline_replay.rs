//! End-to-end pipeline behavior over the scripted model and fake tools:
//! record a cassette, replay it, and check the stage contracts.

use psa_core::config::PipelineConfig;
use psa_core::domain::{Category, PhysicsQuestion, Version};
use psa_core::gateway::{Gateway, RetryPolicy};
use psa_core::pipeline::{Pipeline, RunOptions};
use psa_core::rag::{HashedBagOfWords, RagIndex};
use psa_testkit::{
    fixture_config, fixture_docs, set_fail_plan, CountingTransport, ScriptedModel, VisualMode,
};
use std::path::Path;

fn question() -> PhysicsQuestion {
    PhysicsQuestion::new(
        None,
        "A block slides down a frictionless incline of angle 30 degrees and length 9 m. Find its speed at the bottom.",
        Category::Medium,
    )
}

fn record(
    model: ScriptedModel,
    config: &PipelineConfig,
    cassette: &Path,
    options: &RunOptions,
) -> psa_core::pipeline::RunOutcome {
    let gateway = Gateway::record(
        cassette,
        Box::new(model),
        RetryPolicy {
            max_retries: 1,
            base_delay_ms: 1,
            max_delay_ms: 2,
        },
    )
    .unwrap();
    let rag_index = RagIndex::build(
        &fixture_docs(),
        400,
        50,
        Box::new(HashedBagOfWords::default()),
    )
    .unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        config,
        rag: Some(&rag_index),
    };
    pipeline
        .run(&question(), options)
        .map_err(|f| f.error.to_string())
        .unwrap()
}

#[test]
fn clean_run_produces_two_valid_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(&dir.path().join("tools"), &dir.path().join("out"));
    let cassette = dir.path().join("cassette.jsonl");
    let outcome = record(
        ScriptedModel::new(6),
        &config,
        &cassette,
        &RunOptions::default(),
    );

    assert_eq!(outcome.records.len(), 2);
    let v1 = &outcome.records[0];
    let v2 = &outcome.records[1];
    assert_eq!(v1.version, Version::V1);
    assert_eq!(v2.version, Version::V2);
    for record in &outcome.records {
        assert!(psa_core::domain::validate(record).is_empty());
        assert_eq!(record.fix_attempts_total, 0);
        assert_eq!(record.scenes_aborted, 0);
        assert_eq!(record.error_penalty_score, 5.0);
    }
    // Judge means recomputed from the scripted sub-scores.
    assert!((v1.solution_score - 4.6).abs() < 1e-9);
    assert!((v1.explanation_score - 3.8).abs() < 1e-9);
    // The scripted vision judge scores v2 higher than v1.
    assert!(v2.visual_quality > v1.visual_quality);
    assert!(outcome.run_dir.join("v1/media/final.mp4").exists());
    assert!(outcome.run_dir.join("v2/media/final.mp4").exists());
    assert!(outcome.run_dir.join("run.json").exists());
    // 6 scenes x 3 positions of screenshots per version.
    for version in ["v1", "v2"] {
        let shots = std::fs::read_dir(outcome.run_dir.join(version).join("screenshots"))
            .unwrap()
            .count();
        assert_eq!(shots, 18);
    }
}

#[test]
fn gateway_call_accounting_for_a_clean_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(&dir.path().join("tools"), &dir.path().join("out"));
    let cassette = dir.path().join("cassette.jsonl");
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
    pipeline
        .run(&question(), &RunOptions::default())
        .map_err(|f| f.error.to_string())
        .unwrap();

    let counts = gateway.call_counts();
    assert_eq!(counts.get("solution"), Some(&1));
    assert_eq!(counts.get("scene_plan"), Some(&1));
    assert_eq!(counts.get("codegen"), Some(&1));
    assert_eq!(counts.get("error_fix"), None);
    assert_eq!(counts.get("visual_improve"), Some(&1));
    // 18 v1 screenshots + 18 v2 screenshots.
    assert_eq!(counts.get("screenshot_analysis"), Some(&36));
    // Judge scores are computed once and shared by both version rows.
    assert_eq!(counts.get("judge_solution"), Some(&1));
    assert_eq!(counts.get("judge_explanation"), Some(&1));
}

#[test]
fn repair_loop_feeds_stderr_back_and_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let config = fixture_config(&tools_dir, &dir.path().join("out"));
    // Scene 2's class fails twice in each version's fresh media dir.
    set_fail_plan(&tools_dir, "Scene2Part", 2);
    let cassette = dir.path().join("cassette.jsonl");
    let outcome = record(
        ScriptedModel::new(6),
        &config,
        &cassette,
        &RunOptions::default(),
    );

    let v1 = &outcome.records[0];
    // Two failures in v1 and two more when the improved code re-renders.
    assert_eq!(v1.fix_attempts_total, 2);
    assert_eq!(v1.scenes_aborted, 0);
    assert_eq!(v1.error_penalty_score, 4.0);
    let v2 = &outcome.records[1];
    assert_eq!(v2.fix_attempts_total, 2);

    // The fix prompts carried the renderer stderr; the repaired code landed
    // on attempt 3.
    let attempt3 = outcome.run_dir.join("v1/code/scene_2_attempt_3.py");
    assert!(attempt3.exists());
    let code = std::fs::read_to_string(attempt3).unwrap();
    assert!(code.contains("# repaired"));
    let stderr_log = outcome.run_dir.join("v1/logs/scene_2_attempt_1.stderr.txt");
    assert!(std::fs::read_to_string(stderr_log)
        .unwrap()
        .contains("LaTeX Error"));
}

#[test]
fn persistent_failure_aborts_scene_and_run_completes() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let mut config = fixture_config(&tools_dir, &dir.path().join("out"));
    config.render.pool_size = 1;
    set_fail_plan(&tools_dir, "Scene3Part", 99);
    let cassette = dir.path().join("cassette.jsonl");
    let outcome = record(
        ScriptedModel::new(6),
        &config,
        &cassette,
        &RunOptions { skip_refine: true },
    );

    assert_eq!(outcome.records.len(), 1);
    let v1 = &outcome.records[0];
    assert_eq!(v1.scenes_aborted, 1);
    // 4 fixes burned on the aborted scene.
    assert_eq!(v1.fix_attempts_total, 4);
    assert_eq!(v1.error_penalty_score, 5.0 - 0.5 * 4.0 - 2.0);
    // Final video still assembled from the remaining scenes.
    assert!(outcome.run_dir.join("v1/media/final.mp4").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outcome.run_dir.join("run.json")).unwrap())
            .unwrap();
    let scenes = manifest["versions"]["v1"]["scenes"].as_array().unwrap();
    assert_eq!(scenes[2]["status"], "aborted");
    assert_eq!(scenes[2]["attempts_used"], 5);
}

#[test]
fn refinement_fallback_keeps_v1_video() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let mut config = fixture_config(&tools_dir, &dir.path().join("out"));
    config.render.pool_size = 1;
    let cassette = dir.path().join("cassette.jsonl");
    // Fail plans apply per scene class in every version; invocation counts
    // reset per media dir. Pre-seeding v1's counter past the plan makes
    // scene 1 render in v1 but exhaust its budget in v2.
    set_fail_plan(&tools_dir, "Scene1Part", 5);
    let run_dir = dir.path().join("out/runs").join(&question().id);
    std::fs::create_dir_all(run_dir.join("v1/media")).unwrap();
    std::fs::write(run_dir.join("v1/media/.count_Scene1Part"), "5").unwrap();

    let outcome2 = record(
        ScriptedModel::new(6),
        &config,
        &cassette,
        &RunOptions::default(),
    );

    let v2 = &outcome2.records[1];
    assert_eq!(v2.scenes_aborted, 1);
    assert!(v2.flags.iter().any(|f| f == "scene_fallback:1"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outcome2.run_dir.join("run.json")).unwrap())
            .unwrap();
    let v2_scene1 = &manifest["versions"]["v2"]["scenes"][0];
    assert_eq!(v2_scene1["fell_back_to_v1"], true);
    let video = v2_scene1["video"].as_str().unwrap();
    assert!(
        video.starts_with("v1/"),
        "v2 scene 1 should reference the v1 clip, got {video}"
    );
    // The v1 row for that scene rendered normally.
    let v1_scene1 = &manifest["versions"]["v1"]["scenes"][0];
    assert_eq!(v1_scene1["status"], "success");
}

#[test]
fn all_non_evaluable_skips_refinement_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(&dir.path().join("tools"), &dir.path().join("out"));
    let cassette = dir.path().join("cassette.jsonl");
    let mut model = ScriptedModel::new(6);
    model.visual_mode = VisualMode::AllNonEvaluable;
    let gateway = Gateway::record(&cassette, Box::new(model), RetryPolicy::default()).unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        config: &config,
        rag: None,
    };
    let outcome = pipeline
        .run(&question(), &RunOptions::default())
        .map_err(|f| f.error.to_string())
        .unwrap();

    assert_eq!(gateway.call_count("visual_improve"), 0);
    // Only v1's screenshots were judged; v2 aliases v1.
    assert_eq!(gateway.call_count("screenshot_analysis"), 18);
    assert_eq!(outcome.records.len(), 2);
    let v2 = &outcome.records[1];
    assert!(v2.flags.iter().any(|f| f == "refine_skipped_unevaluable"));
    assert!(v2.flags.iter().any(|f| f == "visual_unevaluable"));
    assert_eq!(v2.visual_quality, 0.0);
    assert!(
        !outcome.run_dir.join("v2").exists(),
        "v2 dir must not exist when aliasing v1"
    );

    // Re-scoring the aliased run reads v1's screenshots for both rows and
    // reproduces the stored scores.
    let rescored =
        psa_core::pipeline::rescore(&gateway, &config, &outcome.run_dir, &config.paths.csv)
            .unwrap();
    assert_eq!(rescored.len(), 2);
    for (orig, redo) in outcome.records.iter().zip(&rescored) {
        assert_eq!(orig.version, redo.version);
        assert_eq!(orig.overall_score, redo.overall_score);
        assert_eq!(orig.flags, redo.flags);
    }
}

#[test]
fn solve_retry_recovers_from_malformed_first_reply() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(&dir.path().join("tools"), &dir.path().join("out"));
    let cassette = dir.path().join("cassette.jsonl");
    let mut model = ScriptedModel::new(6);
    model.solution_malformed_first = true;
    let gateway = Gateway::record(&cassette, Box::new(model), RetryPolicy::default()).unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        config: &config,
        rag: None,
    };
    let outcome = pipeline
        .run(&question(), &RunOptions { skip_refine: true })
        .map_err(|f| f.error.to_string())
        .unwrap();
    assert_eq!(gateway.call_count("solution"), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outcome.run_dir.join("run.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["solve_retries"], 1);
}

#[test]
fn judge_retry_recovers_from_prose_reply() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(&dir.path().join("tools"), &dir.path().join("out"));
    let cassette = dir.path().join("cassette.jsonl");
    let mut model = ScriptedModel::new(6);
    model.judge_malformed_first = true;
    let gateway = Gateway::record(&cassette, Box::new(model), RetryPolicy::default()).unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        config: &config,
        rag: None,
    };
    let outcome = pipeline
        .run(&question(), &RunOptions { skip_refine: true })
        .map_err(|f| f.error.to_string())
        .unwrap();
    assert_eq!(gateway.call_count("judge_solution"), 2);
    assert!((outcome.records[0].solution_score - 4.6).abs() < 1e-9);
}

#[test]
fn cassette_miss_mid_run_writes_failure_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(&dir.path().join("tools"), &dir.path().join("out"));
    let cassette = dir.path().join("cassette.jsonl");
    // Record only the solve step by making the plan call fail: empty replay
    // cassette gets the solve entry first.
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
        // Run fully to fill the cassette.
        pipeline
            .run(&question(), &RunOptions { skip_refine: true })
            .map_err(|f| f.error.to_string())
            .unwrap();
    }
    // Truncate the cassette to its first line (the solve entry).
    let full = std::fs::read_to_string(&cassette).unwrap();
    let first_line = full.lines().next().unwrap();
    std::fs::write(&cassette, format!("{first_line}\n")).unwrap();

    let out2 = dir.path().join("out2");
    let mut config2 = config.clone();
    config2.paths.out_dir = out2.clone();
    config2.paths.csv = out2.join("results.csv");
    let gateway = Gateway::replay(&cassette).unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        config: &config2,
        rag: None,
    };
    let failure = pipeline
        .run(&question(), &RunOptions { skip_refine: true })
        .unwrap_err();
    assert!(failure.error.to_string().contains("cassette miss"));
    let record = failure.failure_record.expect("failure row appended");
    assert!(record.flags.iter().any(|f| f.starts_with("failed:")));
    assert!(config2.paths.csv.exists());
    // Partial artifacts retained.
    assert!(out2
        .join("runs")
        .join(&record.question_id)
        .join("solution.txt")
        .exists());
}

#[test]
fn replay_is_deterministic_and_offline() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let config = fixture_config(&tools_dir, &dir.path().join("out"));
    set_fail_plan(&tools_dir, "Scene2Part", 1);
    let cassette = dir.path().join("cassette.jsonl");
    let recorded = record(
        ScriptedModel::new(6),
        &config,
        &cassette,
        &RunOptions::default(),
    );

    // Replay into a fresh output dir.
    let out2 = dir.path().join("out2");
    let mut config2 = config.clone();
    config2.paths.out_dir = out2.clone();
    config2.paths.csv = out2.join("results.csv");
    let gateway = Gateway::replay(&cassette).unwrap();
    let rag_index = RagIndex::build(
        &fixture_docs(),
        400,
        50,
        Box::new(HashedBagOfWords::default()),
    )
    .unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        config: &config2,
        rag: Some(&rag_index),
    };
    let replayed = pipeline
        .run(&question(), &RunOptions::default())
        .map_err(|f| f.error.to_string())
        .unwrap();

    // Scores and counters identical to the recorded run.
    for (a, b) in recorded.records.iter().zip(&replayed.records) {
        assert_eq!(a.version, b.version);
        assert_eq!(a.overall_score, b.overall_score);
        assert_eq!(a.visual_quality, b.visual_quality);
        assert_eq!(a.fix_attempts_total, b.fix_attempts_total);
        assert_eq!(a.sub_metrics, b.sub_metrics);
        assert_eq!(a.top_issues, b.top_issues);
    }

    // A record-mode gateway over the complete cassette answers everything
    // read-through: zero transport activity on a repeat run.
    let out3 = dir.path().join("out3");
    let mut config3 = config.clone();
    config3.paths.out_dir = out3.clone();
    config3.paths.csv = out3.join("results.csv");
    let counting = CountingTransport::new(ScriptedModel::new(6));
    let counter = counting.counter();
    let readthrough =
        Gateway::record(&cassette, Box::new(counting), RetryPolicy::default()).unwrap();
    let pipeline = Pipeline {
        gateway: &readthrough,
        config: &config3,
        rag: Some(&rag_index),
    };
    pipeline
        .run(&question(), &RunOptions::default())
        .map_err(|f| f.error.to_string())
        .unwrap();
    assert_eq!(
        counter.load(std::sync::atomic::Ordering::SeqCst),
        0,
        "cassette-complete run must not touch the transport"
    );
}
