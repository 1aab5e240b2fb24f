//! The orchestrator: drives the five stages end to end, including the
//! bounded error-correction loop and the one-shot visual refinement pass,
//! then scores both versions and appends rows to the cumulative CSV.

use crate::config::PipelineConfig;
use crate::domain::{
    Category, JudgeEvaluation, PhysicsQuestion, Provenance, RenderResult, RenderStatus, RunRecord,
    Scene, ScenePlan, SceneScript, Screenshot, StructuredSolution, Version, VisualAnalysis,
    MAX_ATTEMPTS,
};
use crate::evaluator;
use crate::gateway::{Gateway, ImagePayload, ModelRequest, ModelRole};
use crate::parsers::{self, ParseError};
use crate::prompts::{self, PromptName};
use crate::rag::RagIndex;
use crate::render::{self, RunPaths};
use crate::reporting;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("stage '{stage}' failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    fn new(stage: &'static str, message: impl ToString) -> Self {
        PipelineError {
            stage,
            message: message.to_string(),
        }
    }
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(name, e.to_string())
}

/// Retrieved documentation as (source, text) pairs, threaded through
/// every coder-facing prompt of a run.
pub type RetrievedDocs = Vec<(String, String)>;

/// Options for one end-to-end run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub skip_refine: bool,
}

/// Final state of one scene within one version.
#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub scene_index: u32,
    pub title: String,
    pub scene_class: String,
    pub script: SceneScript,
    pub result: RenderResult,
    /// Error-fix calls issued for this scene in this version.
    pub fix_calls: u64,
    /// True when a v2 scene reuses its v1 video after refinement failed.
    pub fell_back_to_v1: bool,
}

/// Everything produced for one version of the video.
#[derive(Debug, Clone)]
pub struct VersionArtifacts {
    pub version: Version,
    pub scenes: Vec<SceneOutcome>,
    pub final_video: Option<PathBuf>,
    pub analyses: Vec<VisualAnalysis>,
    pub fix_attempts: u64,
    pub scenes_aborted: u64,
    pub flags: Vec<String>,
    pub aliases_v1: bool,
}

/// Outcome of a full run.
#[derive(Debug)]
pub struct RunOutcome {
    pub question: PhysicsQuestion,
    pub records: Vec<RunRecord>,
    pub warnings: Vec<String>,
    pub run_dir: PathBuf,
}

/// A failed run: the stage-tagged error plus the failure row that was
/// appended to the CSV (when appending itself succeeded).
#[derive(Debug)]
pub struct RunFailure {
    pub error: PipelineError,
    pub failure_record: Option<RunRecord>,
}

/// Per-version manifest entry persisted to `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScene {
    pub index: u32,
    pub title: String,
    pub scene_class: String,
    pub status: RenderStatus,
    pub attempts_used: u32,
    pub video: Option<String>,
    pub duration_s: f64,
    pub fell_back_to_v1: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestVersion {
    pub scenes: Vec<ManifestScene>,
    pub final_video: Option<String>,
    pub fix_attempts: u64,
    pub scenes_aborted: u64,
    pub flags: Vec<String>,
    /// Set when refinement was skipped and this version aliases v1 artifacts.
    pub aliases_v1: bool,
}

/// Deterministic run manifest (wall-clock data lives in `timings.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub question_id: String,
    pub category: String,
    pub question_text: String,
    pub solve_retries: u32,
    pub versions: BTreeMap<String, ManifestVersion>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub started_at: String,
    pub finished_at: String,
    pub solve_s: f64,
    pub plan_s: f64,
    pub code_s: f64,
    pub render_s: f64,
    pub refine_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
}

/// Bounded-worker map that preserves input order.
fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Mutex<VecDeque<(usize, T)>> = Mutex::new(items.into_iter().enumerate().collect());
    let results: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut collected = results.into_inner().expect("results");
    collected.sort_by_key(|(i, _)| *i);
    collected.into_iter().map(|(_, r)| r).collect()
}

enum ImproveOutcome {
    Improved {
        script: SceneScript,
        static_fixes: u64,
    },
    SkippedUnevaluable,
    SkippedNoCode,
}

/// The pipeline driver. Stateless between runs; all per-run state lives on
/// disk under the run directory.
pub struct Pipeline<'a> {
    pub gateway: &'a Gateway,
    pub config: &'a PipelineConfig,
    pub rag: Option<&'a RagIndex>,
}

const SOLVE_RETRY_SUFFIX: &str = "\n\nIMPORTANT: Your previous reply could not be parsed. Reply again with the exact delimited format: start with 'SOLUTION BEGIN:', number every step as '[Step N]' with the labeled fields, and finish with 'SOLUTION END:'.";

impl<'a> Pipeline<'a> {
    fn bindings(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    fn complete_text(
        &self,
        role: ModelRole,
        name: PromptName,
        stage_name: &'static str,
        prompt: String,
    ) -> Result<String, PipelineError> {
        let request = ModelRequest::text(
            role,
            self.config.models.for_role(role).clone(),
            name.as_str(),
            prompt,
        );
        Ok(self
            .gateway
            .complete(&request)
            .map_err(stage(stage_name))?
            .text)
    }

    /// Stage 1: generate and parse the step-by-step solution, with one
    /// automatic re-ask when the reply cannot be parsed.
    pub fn solve(
        &self,
        question: &PhysicsQuestion,
    ) -> Result<(StructuredSolution, u32), PipelineError> {
        let prompt = prompts::render(
            PromptName::Solution,
            &Self::bindings(&[("question_text", &question.text)]),
        )
        .map_err(stage("solve"))?;
        let reply = self.complete_text(
            ModelRole::Solver,
            PromptName::Solution,
            "solve",
            prompt.clone(),
        )?;
        match parsers::parse_solution(&reply, &question.id) {
            Ok(solution) => Ok((solution, 0)),
            Err(first_err) => {
                let retry_prompt = format!("{prompt}{SOLVE_RETRY_SUFFIX}");
                let reply = self.complete_text(
                    ModelRole::Solver,
                    PromptName::Solution,
                    "solve",
                    retry_prompt,
                )?;
                match parsers::parse_solution(&reply, &question.id) {
                    Ok(solution) => Ok((solution, 1)),
                    Err(_) => Err(PipelineError::new("solve", first_err)),
                }
            }
        }
    }

    /// Stage 2: plan scenes from the solution. Lint findings come back as
    /// warnings, never failures.
    pub fn plan(
        &self,
        question: &PhysicsQuestion,
        solution: &StructuredSolution,
    ) -> Result<(ScenePlan, Vec<String>), PipelineError> {
        let prompt = prompts::render(
            PromptName::ScenePlan,
            &Self::bindings(&[
                ("question", &question.text),
                ("solution", &solution.raw_text),
            ]),
        )
        .map_err(stage("plan"))?;
        let reply =
            self.complete_text(ModelRole::Planner, PromptName::ScenePlan, "plan", prompt)?;
        let plan = parsers::parse_scene_plan(&reply, &question.id).map_err(stage("plan"))?;
        let mut warnings = parsers::lint_scene_plan(&plan);
        if let Some(first) = plan.scenes.first() {
            let greeting = ["hello", "welcome", "today"];
            let lower = first.narration.to_lowercase();
            if !greeting.iter().any(|g| lower.starts_with(g)) {
                warnings.push(
                    "scene 1 narration does not open with a teacher greeting (Hello/Welcome/Today)"
                        .to_string(),
                );
            }
        }
        Ok((plan, warnings))
    }

    /// One retrieval per codegen call; the same chunks ground the fix and
    /// improve prompts.
    fn rag_chunks(&self, plan: &ScenePlan) -> RetrievedDocs {
        let Some(index) = self.rag else {
            return Vec::new();
        };
        let query: String = plan
            .scenes
            .iter()
            .flat_map(|s| [s.title.as_str(), s.layout.as_str()])
            .collect::<Vec<_>>()
            .join(" ");
        index
            .retrieve(&query, self.config.retrieval.k)
            .into_iter()
            .map(|c| (c.source, c.text))
            .collect()
    }

    /// Repairs a script against static checks, consuming attempts from the
    /// same budget the render loop uses.
    fn static_repair_loop(
        &self,
        mut script: SceneScript,
        plan: &ScenePlan,
        chunks: &[(String, String)],
        stage_name: &'static str,
        warnings: &mut Vec<String>,
    ) -> Result<(SceneScript, u64), PipelineError> {
        let mut fixes = 0u64;
        loop {
            let violations = render::static_check(&script);
            if violations.is_empty() {
                return Ok((script, fixes));
            }
            if script.attempt >= MAX_ATTEMPTS {
                warnings.push(format!(
                    "static violations remain after the repair budget: {}",
                    violations.join(" | ")
                ));
                return Ok((script, fixes));
            }
            let prompt = prompts::render(
                PromptName::ErrorFix,
                &Self::bindings(&[
                    ("scene_plan", &plan.raw_text),
                    ("code", &script.source),
                    ("error_message", &violations.join("\n")),
                ]),
            )
            .map_err(stage(stage_name))?;
            let prompt = prompts::append_rag_context(&prompt, chunks);
            let reply =
                self.complete_text(ModelRole::Coder, PromptName::ErrorFix, stage_name, prompt)?;
            fixes += 1;
            let source = match parsers::extract_code(&reply) {
                Ok(s) => s,
                Err(ParseError::NoCode) => {
                    warnings.push(format!(
                        "fix reply for attempt {} contained no code; keeping previous script",
                        script.attempt + 1
                    ));
                    script.source.clone()
                }
                Err(e) => return Err(PipelineError::new(stage_name, e)),
            };
            script = SceneScript {
                scene_index: script.scene_index,
                source,
                attempt: script.attempt + 1,
                provenance: Provenance::ErrorFixed,
            };
        }
    }

    /// Stage 3: one codegen call grounded with retrieved documentation,
    /// followed by the static-check repair loop. Scene classes map to plan
    /// scenes by declaration order.
    pub fn generate_code(
        &self,
        question: &PhysicsQuestion,
        solution: &StructuredSolution,
        plan: &ScenePlan,
        warnings: &mut Vec<String>,
    ) -> Result<(SceneScript, u64, RetrievedDocs), PipelineError> {
        let chunks = self.rag_chunks(plan);
        let prompt = prompts::render(
            PromptName::Codegen,
            &Self::bindings(&[
                ("question", &question.text),
                ("solution", &solution.raw_text),
                ("scene_plan", &plan.raw_text),
            ]),
        )
        .map_err(stage("code"))?;
        let prompt = prompts::append_rag_context(&prompt, &chunks);
        let reply = self.complete_text(ModelRole::Coder, PromptName::Codegen, "code", prompt)?;
        let source = parsers::extract_code(&reply).map_err(stage("code"))?;
        let script = SceneScript {
            scene_index: 0,
            source,
            attempt: 1,
            provenance: Provenance::Generated,
        };
        let (script, fixes) = self.static_repair_loop(script, plan, &chunks, "code", warnings)?;
        let classes = render::scene_classes(&script.source);
        if classes.len() != plan.scenes.len() {
            warnings.push(format!(
                "generated {} scene classes for {} planned scenes",
                classes.len(),
                plan.scenes.len()
            ));
        }
        Ok((script, fixes, chunks))
    }

    /// Stage 4 for one scene: render, and on failure feed stderr back to
    /// the coder, up to five attempts total (counting any attempts already
    /// consumed by static repair). Every attempt's code and stderr are
    /// persisted under the run directory.
    pub fn execute_with_repair(
        &self,
        mut script: SceneScript,
        scene_class: &str,
        plan: &ScenePlan,
        chunks: &[(String, String)],
        paths: &RunPaths,
        version: Version,
    ) -> Result<(SceneScript, RenderResult), PipelineError> {
        let code_dir = paths.code_dir(version);
        let logs_dir = paths.logs_dir(version);
        let media_dir = paths.media_dir(version);
        loop {
            let script_path = code_dir.join(format!(
                "scene_{}_attempt_{}.py",
                script.scene_index, script.attempt
            ));
            fs::write(&script_path, &script.source).map_err(stage("render"))?;
            let mut result = render::render_scene(
                &self.config.tools,
                &script,
                scene_class,
                &script_path,
                &media_dir,
                self.config.render.timeout_s,
            )
            .map_err(stage("render"))?;
            fs::write(
                logs_dir.join(format!(
                    "scene_{}_attempt_{}.stderr.txt",
                    script.scene_index, script.attempt
                )),
                &result.stderr,
            )
            .map_err(stage("render"))?;
            if result.status == RenderStatus::Success {
                return Ok((script, result));
            }
            if script.attempt >= MAX_ATTEMPTS {
                result.status = RenderStatus::Aborted;
                result.attempts_used = MAX_ATTEMPTS;
                return Ok((script, result));
            }
            let prompt = prompts::render(
                PromptName::ErrorFix,
                &Self::bindings(&[
                    ("scene_plan", &plan.raw_text),
                    ("code", &script.source),
                    ("error_message", &result.stderr),
                ]),
            )
            .map_err(stage("render"))?;
            let prompt = prompts::append_rag_context(&prompt, chunks);
            let reply =
                self.complete_text(ModelRole::Coder, PromptName::ErrorFix, "render", prompt)?;
            let source = parsers::extract_code(&reply).unwrap_or_else(|_| script.source.clone());
            script = SceneScript {
                scene_index: script.scene_index,
                source,
                attempt: script.attempt + 1,
                provenance: Provenance::ErrorFixed,
            };
        }
    }

    /// Renders every scene of a version through the repair loop, fanning
    /// out over the bounded worker pool.
    fn render_version(
        &self,
        base_script: &SceneScript,
        plan: &ScenePlan,
        chunks: &[(String, String)],
        paths: &RunPaths,
        version: Version,
    ) -> Result<Vec<SceneOutcome>, PipelineError> {
        paths.ensure(version).map_err(stage("render"))?;
        let classes = render::scene_classes(&base_script.source);
        let base_attempt = base_script.attempt;
        let jobs: Vec<(usize, Scene)> = plan.scenes.iter().cloned().enumerate().collect();
        let outcomes = parallel_map(jobs, self.config.render.pool_size, |(i, scene)| {
            let Some((class_name, _)) = classes.get(i) else {
                return Ok(SceneOutcome {
                    scene_index: scene.index,
                    title: scene.title.clone(),
                    scene_class: String::new(),
                    script: SceneScript {
                        scene_index: scene.index,
                        source: base_script.source.clone(),
                        attempt: base_attempt,
                        provenance: base_script.provenance,
                    },
                    result: RenderResult {
                        scene_index: scene.index,
                        status: RenderStatus::Aborted,
                        stderr: "no scene class generated for this scene".to_string(),
                        video_path: None,
                        duration_s: 0.0,
                        attempts_used: MAX_ATTEMPTS,
                        wall_time_s: 0.0,
                    },
                    fix_calls: 0,
                    fell_back_to_v1: false,
                });
            };
            let script = SceneScript {
                scene_index: scene.index,
                source: base_script.source.clone(),
                attempt: base_attempt,
                provenance: base_script.provenance,
            };
            let (script, result) =
                self.execute_with_repair(script, class_name, plan, chunks, paths, version)?;
            Ok(SceneOutcome {
                scene_index: scene.index,
                title: scene.title.clone(),
                scene_class: class_name.clone(),
                fix_calls: u64::from(result.attempts_used.saturating_sub(base_attempt)),
                script,
                result,
                fell_back_to_v1: false,
            })
        });
        outcomes.into_iter().collect()
    }

    /// Captures screenshots for every scene of a version that has a video
    /// (rendered or fallen back) and runs the vision judge on each, in
    /// (scene, position) order. Aborted scenes without a video are skipped.
    fn analyze_version(
        &self,
        scenes: &[SceneOutcome],
        plan: &ScenePlan,
        paths: &RunPaths,
        version: Version,
    ) -> Result<Vec<VisualAnalysis>, PipelineError> {
        let shots_dir = paths.screenshots_dir(version);
        let mut shots: Vec<(Screenshot, Scene)> = Vec::new();
        for outcome in scenes {
            if outcome.result.status != RenderStatus::Success && !outcome.fell_back_to_v1 {
                continue;
            }
            let Some(video) = &outcome.result.video_path else {
                continue;
            };
            let scene = plan
                .scenes
                .iter()
                .find(|s| s.index == outcome.scene_index)
                .cloned()
                .ok_or_else(|| PipelineError::new("eval", "scene missing from plan"))?;
            let captured = render::capture_screenshots(
                &self.config.tools,
                Path::new(video),
                outcome.result.duration_s,
                outcome.scene_index,
                &shots_dir,
            )
            .map_err(stage("eval"))?;
            for shot in captured {
                shots.push((shot, scene.clone()));
            }
        }
        let analyses = parallel_map(shots, self.config.render.pool_size, |(shot, scene)| {
            self.analyze_screenshot(&shot, &scene)
        });
        let mut analyses: Vec<VisualAnalysis> = analyses.into_iter().collect::<Result<_, _>>()?;
        analyses.sort_by_key(|a| (a.scene_index, a.position));
        Ok(analyses)
    }

    /// One vision-judge call for one screenshot, with a single re-ask when
    /// the reply is not valid rubric JSON.
    pub fn analyze_screenshot(
        &self,
        shot: &Screenshot,
        scene: &Scene,
    ) -> Result<VisualAnalysis, PipelineError> {
        let scene_data = format!(
            "Title: {}\nPurpose: {}\nDescription: {}\nLayout: {}\nNarration: {}",
            scene.title, scene.purpose, scene.description, scene.layout, scene.narration
        );
        let prompt = prompts::render(
            PromptName::ScreenshotAnalysis,
            &Self::bindings(&[
                ("scene_index", &shot.scene_index.to_string()),
                ("scene_data", &scene_data),
                ("timestamp_label", shot.position.label()),
            ]),
        )
        .map_err(stage("eval"))?;
        let image = ImagePayload {
            media_type: "image/png".to_string(),
            data: fs::read(&shot.image_path).map_err(stage("eval"))?,
        };
        let config = self.config.models.for_role(ModelRole::VisionJudge).clone();
        let mut request = ModelRequest::text(
            ModelRole::VisionJudge,
            config.clone(),
            PromptName::ScreenshotAnalysis.as_str(),
            prompt.clone(),
        );
        request.images = vec![image.clone()];
        let reply = self.gateway.complete(&request).map_err(stage("eval"))?;
        match parsers::parse_visual_json(&reply.text, shot.scene_index, shot.position) {
            Ok(a) => Ok(a),
            Err(_) => {
                let mut retry = ModelRequest::text(
                    ModelRole::VisionJudge,
                    config,
                    PromptName::ScreenshotAnalysis.as_str(),
                    format!("{prompt}\n\nIMPORTANT: Your previous reply was not valid JSON for the required schema. Return ONLY the JSON object."),
                );
                retry.images = vec![image];
                let reply = self.gateway.complete(&retry).map_err(stage("eval"))?;
                parsers::parse_visual_json(&reply.text, shot.scene_index, shot.position)
                    .map_err(stage("eval"))
            }
        }
    }

    /// Aggregates vision feedback into the actionable block format consumed
    /// by the improvement prompt. `None` when nothing was evaluable.
    pub fn aggregate_visual_feedback(
        plan: &ScenePlan,
        analyses: &[VisualAnalysis],
    ) -> Option<String> {
        if !analyses.iter().any(|a| a.evaluable) {
            return None;
        }
        let mut blocks = Vec::new();
        for scene in &plan.scenes {
            let mut issues: Vec<&str> = Vec::new();
            let mut suggestions: Vec<&str> = Vec::new();
            for a in analyses
                .iter()
                .filter(|a| a.scene_index == scene.index && a.evaluable)
            {
                for issue in &a.issues {
                    if !issues.contains(&issue.as_str()) {
                        issues.push(issue);
                    }
                }
                for s in &a.suggestions {
                    if !suggestions.contains(&s.as_str()) {
                        suggestions.push(s);
                    }
                }
            }
            if issues.is_empty() && suggestions.is_empty() {
                continue;
            }
            blocks.push(format!(
                "Scene{} ({}): issues: {}; suggestions: {}",
                scene.index,
                scene.title,
                issues.join("; "),
                suggestions.join("; ")
            ));
        }
        Some(blocks.join("\n"))
    }

    /// Stage 5 decision: render the improvement prompt against the last
    /// successfully rendered code and run the static repair loop on the
    /// reply.
    fn improve_code(
        &self,
        v1_scenes: &[SceneOutcome],
        plan: &ScenePlan,
        analyses: &[VisualAnalysis],
        chunks: &[(String, String)],
        warnings: &mut Vec<String>,
    ) -> Result<ImproveOutcome, PipelineError> {
        let Some(feedback) = Self::aggregate_visual_feedback(plan, analyses) else {
            return Ok(ImproveOutcome::SkippedUnevaluable);
        };
        // The screenshots depict the last successfully rendered code; when
        // scenes diverged through repairs, that is the highest-attempt
        // successful script.
        let Some(base) = v1_scenes
            .iter()
            .filter(|s| s.result.status == RenderStatus::Success)
            .max_by_key(|s| (s.script.attempt, s.scene_index))
        else {
            return Ok(ImproveOutcome::SkippedUnevaluable);
        };
        let prompt = prompts::render(
            PromptName::VisualImprove,
            &Self::bindings(&[
                ("scene_plan", &plan.raw_text),
                ("code", &base.script.source),
                ("visual_feedback", &feedback),
            ]),
        )
        .map_err(stage("refine"))?;
        let prompt = prompts::append_rag_context(&prompt, chunks);
        let reply = self.complete_text(
            ModelRole::Coder,
            PromptName::VisualImprove,
            "refine",
            prompt,
        )?;
        let source = match parsers::extract_code(&reply) {
            Ok(s) => s,
            Err(ParseError::NoCode) => {
                warnings.push("improvement reply contained no code; keeping v1".to_string());
                return Ok(ImproveOutcome::SkippedNoCode);
            }
            Err(e) => return Err(PipelineError::new("refine", e)),
        };
        let script = SceneScript {
            scene_index: 0,
            source,
            attempt: 1,
            provenance: Provenance::VisuallyImproved,
        };
        let (script, static_fixes) =
            self.static_repair_loop(script, plan, chunks, "refine", warnings)?;
        Ok(ImproveOutcome::Improved {
            script,
            static_fixes,
        })
    }

    fn assemble_version(
        &self,
        scenes: &[SceneOutcome],
        paths: &RunPaths,
        version: Version,
    ) -> Result<Option<PathBuf>, PipelineError> {
        let clips: Vec<PathBuf> = scenes
            .iter()
            .filter_map(|s| s.result.video_path.as_ref().map(PathBuf::from))
            .collect();
        if clips.is_empty() {
            return Ok(None);
        }
        let out = paths.media_dir(version).join("final.mp4");
        let assembled =
            render::assemble(&self.config.tools, &clips, &out).map_err(stage("render"))?;
        Ok(Some(assembled))
    }

    /// Full run: solve → plan → code → render v1 → refine → render v2 →
    /// evaluate both versions → one CSV row per version.
    #[allow(clippy::result_large_err)] // one Err per run, size is irrelevant
    pub fn run(
        &self,
        question: &PhysicsQuestion,
        options: &RunOptions,
    ) -> Result<RunOutcome, RunFailure> {
        let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let total_clock = Instant::now();
        let mut timings = StageTimings {
            started_at,
            ..Default::default()
        };
        let mut warnings = Vec::new();

        let result = self.run_inner(question, options, total_clock, &mut timings, &mut warnings);
        if timings.finished_at.is_empty() {
            timings.total_s = total_clock.elapsed().as_secs_f64();
            timings.finished_at =
                chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        }

        match result {
            Ok(outcome) => {
                let paths = RunPaths::new(&self.config.paths.out_dir, &question.id);
                let _ = fs::write(
                    paths.run_dir().join("timings.json"),
                    serde_json::to_string_pretty(&timings).expect("timings serialize"),
                );
                Ok(outcome)
            }
            Err(error) => {
                // Stage-tagged failure row so the CSV accounts for the run.
                let record = self.failure_record(question, &error, &timings);
                let appended = reporting::append(&record, &self.config.paths.csv).is_ok();
                Err(RunFailure {
                    error,
                    failure_record: appended.then_some(record),
                })
            }
        }
    }

    fn failure_record(
        &self,
        question: &PhysicsQuestion,
        error: &PipelineError,
        timings: &StageTimings,
    ) -> RunRecord {
        RunRecord {
            question_id: question.id.clone(),
            category: question.category.as_str().to_lowercase(),
            version: Version::V1,
            started_at: timings.started_at.clone(),
            finished_at: timings.finished_at.clone(),
            solve_s: timings.solve_s,
            plan_s: timings.plan_s,
            code_s: timings.code_s,
            render_s: timings.render_s,
            refine_s: timings.refine_s,
            eval_s: timings.eval_s,
            total_s: timings.total_s,
            fix_attempts_total: 0,
            scenes_aborted: 0,
            sub_metrics: vec![0.0; 15],
            solution_score: 0.0,
            explanation_score: 0.0,
            visual_quality: 0.0,
            error_penalty_score: 0.0,
            overall_score: 0.0,
            max_scene_vqs: None,
            flags: vec![format!("failed:{}", error.stage)],
            top_issues: vec![sanitize_field(&error.message)],
        }
    }

    fn run_inner(
        &self,
        question: &PhysicsQuestion,
        options: &RunOptions,
        total_clock: Instant,
        timings: &mut StageTimings,
        warnings: &mut Vec<String>,
    ) -> Result<RunOutcome, PipelineError> {
        let paths = RunPaths::new(&self.config.paths.out_dir, &question.id);
        fs::create_dir_all(paths.run_dir()).map_err(stage("solve"))?;
        fs::write(
            paths.run_dir().join("question.txt"),
            format!(
                "{}\n{}\n",
                question.category.as_str().to_lowercase(),
                question.text
            ),
        )
        .map_err(stage("solve"))?;

        // Stage 1: solve.
        let clock = Instant::now();
        let (solution, solve_retries) = self.solve(question)?;
        timings.solve_s = clock.elapsed().as_secs_f64();
        fs::write(paths.run_dir().join("solution.txt"), &solution.raw_text)
            .map_err(stage("solve"))?;

        // Stage 2: plan.
        let clock = Instant::now();
        let (plan, lint_warnings) = self.plan(question, &solution)?;
        timings.plan_s = clock.elapsed().as_secs_f64();
        warnings.extend(lint_warnings);
        fs::write(paths.run_dir().join("scene_plan.txt"), &plan.raw_text).map_err(stage("plan"))?;

        // Stage 3: code.
        let clock = Instant::now();
        let (script, static_fixes, chunks) =
            self.generate_code(question, &solution, &plan, warnings)?;
        timings.code_s = clock.elapsed().as_secs_f64();

        // Stage 4: render v1.
        let clock = Instant::now();
        let v1_scenes = self.render_version(&script, &plan, &chunks, &paths, Version::V1)?;
        let v1_final = self.assemble_version(&v1_scenes, &paths, Version::V1)?;
        timings.render_s = clock.elapsed().as_secs_f64();
        if v1_final.is_none() {
            return Err(PipelineError::new(
                "render",
                "no scene rendered successfully",
            ));
        }
        let v1_loop_fixes: u64 = v1_scenes.iter().map(|s| s.fix_calls).sum();
        let scenes_aborted = v1_scenes
            .iter()
            .filter(|s| s.result.status == RenderStatus::Aborted)
            .count() as u64;
        let mut v1 = VersionArtifacts {
            version: Version::V1,
            scenes: v1_scenes,
            final_video: v1_final,
            analyses: Vec::new(),
            fix_attempts: static_fixes + v1_loop_fixes,
            scenes_aborted,
            flags: Vec::new(),
            aliases_v1: false,
        };

        // Stage 5: refine (exactly once, unless skipped).
        let mut v2: Option<VersionArtifacts> = None;
        if !options.skip_refine {
            let clock = Instant::now();
            v1.analyses = self.analyze_version(&v1.scenes, &plan, &paths, Version::V1)?;
            match self.improve_code(&v1.scenes, &plan, &v1.analyses, &chunks, warnings)? {
                ImproveOutcome::SkippedUnevaluable | ImproveOutcome::SkippedNoCode => {
                    // v2 aliases v1 wholesale; no new artifacts, no new
                    // vision calls.
                    let flag = "refine_skipped_unevaluable".to_string();
                    warnings.push("refinement skipped: no usable visual feedback".to_string());
                    let mut alias = v1.clone();
                    alias.version = Version::V2;
                    alias.flags = vec![flag];
                    alias.aliases_v1 = true;
                    v2 = Some(alias);
                }
                ImproveOutcome::Improved {
                    script: improved,
                    static_fixes: v2_static,
                } => {
                    let mut v2_scenes =
                        self.render_version(&improved, &plan, &chunks, &paths, Version::V2)?;
                    // Scenes whose improved code never rendered fall back to
                    // their v1 video so the final assembly stays complete.
                    for scene in &mut v2_scenes {
                        if scene.result.status != RenderStatus::Aborted {
                            continue;
                        }
                        let Some(v1_scene) = v1.scenes.iter().find(|s| {
                            s.scene_index == scene.scene_index
                                && s.result.status == RenderStatus::Success
                        }) else {
                            continue;
                        };
                        scene.result.video_path = v1_scene.result.video_path.clone();
                        scene.result.duration_s = v1_scene.result.duration_s;
                        scene.fell_back_to_v1 = true;
                    }
                    let v2_final = self.assemble_version(&v2_scenes, &paths, Version::V2)?;
                    let v2_loop_fixes: u64 = v2_scenes.iter().map(|s| s.fix_calls).sum();
                    let mut flags: Vec<String> = v2_scenes
                        .iter()
                        .filter(|s| s.fell_back_to_v1)
                        .map(|s| format!("scene_fallback:{}", s.scene_index))
                        .collect();
                    let aborted = v2_scenes
                        .iter()
                        .filter(|s| s.result.status == RenderStatus::Aborted)
                        .count() as u64;
                    if v2_final.is_none() {
                        flags.push("v2_assembly_empty".to_string());
                    }
                    v2 = Some(VersionArtifacts {
                        version: Version::V2,
                        scenes: v2_scenes,
                        final_video: v2_final,
                        analyses: Vec::new(),
                        fix_attempts: v2_static + v2_loop_fixes,
                        scenes_aborted: aborted,
                        flags,
                        aliases_v1: false,
                    });
                }
            }
            timings.refine_s = clock.elapsed().as_secs_f64();
        }

        // Evaluation: shared judge calls, per-version visual analysis.
        let clock = Instant::now();
        if v1.analyses.is_empty() {
            v1.analyses = self.analyze_version(&v1.scenes, &plan, &paths, Version::V1)?;
        }
        if let Some(v2) = v2.as_mut() {
            if v2.aliases_v1 {
                v2.analyses = v1.analyses.clone();
            } else {
                v2.analyses = self.analyze_version(&v2.scenes, &plan, &paths, Version::V2)?;
            }
        }
        let judge_config = &self.config.models.judge;
        let sol_eval = evaluator::judge_solution(self.gateway, judge_config, question, &solution)
            .map_err(stage("eval"))?;
        let exp_eval =
            evaluator::judge_explanation(self.gateway, judge_config, question, &solution, &plan)
                .map_err(stage("eval"))?;
        timings.eval_s = clock.elapsed().as_secs_f64();

        // Timings close out before records are built so every CSV row
        // carries the full wall-clock picture.
        timings.total_s = total_clock.elapsed().as_secs_f64();
        timings.finished_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);

        // Persist artifacts and build records.
        let mut records = Vec::new();
        let mut manifest_versions = BTreeMap::new();
        let versions: Vec<&VersionArtifacts> = std::iter::once(&v1).chain(v2.as_ref()).collect();
        for artifacts in &versions {
            let record = build_record(question, artifacts, &sol_eval, &exp_eval, timings);
            reporting::append(&record, &self.config.paths.csv).map_err(stage("eval"))?;
            let version_dir = paths.version_dir(if artifacts.aliases_v1 {
                Version::V1
            } else {
                artifacts.version
            });
            if !artifacts.aliases_v1 {
                fs::write(
                    version_dir.join("analyses.json"),
                    serde_json::to_string_pretty(&artifacts.analyses).expect("analyses serialize"),
                )
                .map_err(stage("eval"))?;
                // Wall-clock data stays out of this file so replayed runs
                // remain byte-identical.
                fs::write(
                    version_dir.join("evaluation.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "solution": sol_eval,
                        "explanation": exp_eval,
                        "scores": {
                            "sq": record.solution_score,
                            "eq": record.explanation_score,
                            "vq": record.visual_quality,
                            "ep": record.error_penalty_score,
                            "os": record.overall_score,
                            "max_scene_vqs": record.max_scene_vqs,
                            "fix_attempts_total": record.fix_attempts_total,
                            "scenes_aborted": record.scenes_aborted,
                            "flags": record.flags,
                            "top_issues": record.top_issues,
                        },
                    }))
                    .expect("evaluation serialize"),
                )
                .map_err(stage("eval"))?;
            }
            manifest_versions.insert(
                artifacts.version.as_str().to_string(),
                manifest_version(artifacts, &paths),
            );
            records.push(record);
        }

        let manifest = RunManifest {
            question_id: question.id.clone(),
            category: question.category.as_str().to_lowercase(),
            question_text: question.text.clone(),
            solve_retries,
            versions: manifest_versions,
        };
        fs::write(
            paths.run_dir().join("run.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serialize"),
        )
        .map_err(stage("eval"))?;

        Ok(RunOutcome {
            question: question.clone(),
            records,
            warnings: std::mem::take(warnings),
            run_dir: paths.run_dir(),
        })
    }
}

fn relative_to(path: &str, base: &Path) -> String {
    Path::new(path)
        .strip_prefix(base)
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| path.to_string())
}

fn manifest_version(artifacts: &VersionArtifacts, paths: &RunPaths) -> ManifestVersion {
    let base = paths.run_dir();
    ManifestVersion {
        scenes: artifacts
            .scenes
            .iter()
            .map(|s| ManifestScene {
                index: s.scene_index,
                title: s.title.clone(),
                scene_class: s.scene_class.clone(),
                status: s.result.status,
                attempts_used: s.result.attempts_used,
                video: s.result.video_path.as_ref().map(|v| relative_to(v, &base)),
                duration_s: s.result.duration_s,
                fell_back_to_v1: s.fell_back_to_v1,
            })
            .collect(),
        final_video: artifacts
            .final_video
            .as_ref()
            .map(|v| relative_to(&v.display().to_string(), &base)),
        fix_attempts: artifacts.fix_attempts,
        scenes_aborted: artifacts.scenes_aborted,
        flags: artifacts.flags.clone(),
        aliases_v1: artifacts.aliases_v1,
    }
}

fn sanitize_field(s: &str) -> String {
    s.replace(';', ",").replace('\n', " ")
}

/// Builds one CSV record for one version from the shared judge evaluations
/// and the version's visual analyses.
pub fn build_record(
    question: &PhysicsQuestion,
    artifacts: &VersionArtifacts,
    sol_eval: &JudgeEvaluation,
    exp_eval: &JudgeEvaluation,
    timings: &StageTimings,
) -> RunRecord {
    let per_scene: Vec<Option<f64>> = artifacts
        .scenes
        .iter()
        .map(|s| {
            let scene_analyses: Vec<VisualAnalysis> = artifacts
                .analyses
                .iter()
                .filter(|a| a.scene_index == s.scene_index)
                .cloned()
                .collect();
            evaluator::scene_vqs(&scene_analyses)
        })
        .collect();
    let (vq, max_scene_vqs) = evaluator::video_visual_quality(&per_scene);
    let mut flags = artifacts.flags.clone();
    if max_scene_vqs.is_none() {
        flags.push("visual_unevaluable".to_string());
    }
    let ep = evaluator::error_penalty_score(artifacts.fix_attempts, artifacts.scenes_aborted);
    let sq = sol_eval.overall;
    let eq = exp_eval.overall;
    let os = crate::domain::weighted_overall(sq, eq, vq, ep);

    let mut sub_metrics = Vec::with_capacity(15);
    for name in crate::domain::JudgeKind::Solution.metric_names() {
        sub_metrics.push(*sol_eval.sub_scores.get(name).unwrap_or(&0.0));
    }
    for name in crate::domain::JudgeKind::Explanation.metric_names() {
        sub_metrics.push(*exp_eval.sub_scores.get(name).unwrap_or(&0.0));
    }
    sub_metrics.extend(evaluator::visual_sub_metric_means(&artifacts.analyses));

    let mut top_issues: Vec<String> = Vec::new();
    for issue in sol_eval
        .weaknesses
        .iter()
        .chain(exp_eval.weaknesses.iter())
        .chain(artifacts.analyses.iter().flat_map(|a| a.issues.iter()))
    {
        let clean = sanitize_field(issue);
        if !top_issues.contains(&clean) {
            top_issues.push(clean);
        }
    }

    RunRecord {
        question_id: question.id.clone(),
        category: question.category.as_str().to_lowercase(),
        version: artifacts.version,
        started_at: timings.started_at.clone(),
        finished_at: timings.finished_at.clone(),
        solve_s: timings.solve_s,
        plan_s: timings.plan_s,
        code_s: timings.code_s,
        render_s: timings.render_s,
        refine_s: timings.refine_s,
        eval_s: timings.eval_s,
        total_s: timings.total_s,
        fix_attempts_total: artifacts.fix_attempts as i64,
        scenes_aborted: artifacts.scenes_aborted as i64,
        sub_metrics,
        solution_score: sq,
        explanation_score: eq,
        visual_quality: vq,
        error_penalty_score: ep,
        overall_score: os,
        max_scene_vqs,
        flags,
        top_issues,
    }
}

/// Re-scores an existing run directory from its persisted artifacts and
/// screenshots, rewriting that run's CSV rows. Screenshots must already
/// exist; nothing is re-rendered.
pub fn rescore(
    gateway: &Gateway,
    config: &PipelineConfig,
    run_dir: &Path,
    csv_path: &Path,
) -> Result<Vec<RunRecord>, PipelineError> {
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(run_dir.join("run.json")).map_err(stage("eval"))?)
            .map_err(stage("eval"))?;
    let timings: StageTimings = fs::read_to_string(run_dir.join("timings.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let category = Category::parse(&manifest.category)
        .ok_or_else(|| PipelineError::new("eval", "unknown category in manifest"))?;
    let question = PhysicsQuestion {
        id: manifest.question_id.clone(),
        text: manifest.question_text.clone(),
        category,
    };
    let solution_raw = fs::read_to_string(run_dir.join("solution.txt")).map_err(stage("eval"))?;
    let plan_raw = fs::read_to_string(run_dir.join("scene_plan.txt")).map_err(stage("eval"))?;
    let solution = parsers::parse_solution(&solution_raw, &question.id).map_err(stage("eval"))?;
    let plan = parsers::parse_scene_plan(&plan_raw, &question.id).map_err(stage("eval"))?;

    let pipeline = Pipeline {
        gateway,
        config,
        rag: None,
    };
    let sol_eval = evaluator::judge_solution(gateway, &config.models.judge, &question, &solution)
        .map_err(stage("eval"))?;
    let exp_eval =
        evaluator::judge_explanation(gateway, &config.models.judge, &question, &solution, &plan)
            .map_err(stage("eval"))?;

    let mut records = Vec::new();
    for (version_name, mv) in &manifest.versions {
        let version = Version::parse(version_name)
            .ok_or_else(|| PipelineError::new("eval", "unknown version in manifest"))?;
        let shots_version = if mv.aliases_v1 { Version::V1 } else { version };
        let shots_dir = run_dir.join(shots_version.as_str()).join("screenshots");
        let mut analyses = Vec::new();
        for ms in &mv.scenes {
            if ms.status != RenderStatus::Success && !ms.fell_back_to_v1 {
                continue;
            }
            let scene = plan
                .scenes
                .iter()
                .find(|s| s.index == ms.index)
                .ok_or_else(|| PipelineError::new("eval", "manifest scene missing from plan"))?;
            for (position, t) in render::screenshot_timestamps(ms.duration_s) {
                let image = shots_dir.join(format!("scene_{}_{}.png", ms.index, position.label()));
                if !image.exists() {
                    return Err(PipelineError::new(
                        "eval",
                        format!("missing screenshot: {}", image.display()),
                    ));
                }
                let shot = Screenshot {
                    scene_index: ms.index,
                    position,
                    timestamp_s: t,
                    image_path: image.display().to_string(),
                };
                analyses.push(pipeline.analyze_screenshot(&shot, scene)?);
            }
        }
        analyses.sort_by_key(|a| (a.scene_index, a.position));
        let artifacts = VersionArtifacts {
            version,
            scenes: mv
                .scenes
                .iter()
                .map(|ms| SceneOutcome {
                    scene_index: ms.index,
                    title: ms.title.clone(),
                    scene_class: ms.scene_class.clone(),
                    script: SceneScript {
                        scene_index: ms.index,
                        source: String::new(),
                        attempt: ms.attempts_used.max(1),
                        provenance: Provenance::Generated,
                    },
                    result: RenderResult {
                        scene_index: ms.index,
                        status: ms.status,
                        stderr: String::new(),
                        video_path: ms.video.clone(),
                        duration_s: ms.duration_s,
                        attempts_used: ms.attempts_used,
                        wall_time_s: 0.0,
                    },
                    fix_calls: 0,
                    fell_back_to_v1: ms.fell_back_to_v1,
                })
                .collect(),
            final_video: mv.final_video.as_ref().map(PathBuf::from),
            analyses,
            fix_attempts: mv.fix_attempts,
            scenes_aborted: mv.scenes_aborted,
            flags: mv.flags.clone(),
            aliases_v1: mv.aliases_v1,
        };
        let record = build_record(&question, &artifacts, &sol_eval, &exp_eval, &timings);
        reporting::upsert(&record, csv_path).map_err(stage("eval"))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ScreenshotPosition;

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..17).collect();
        let out = parallel_map(items.clone(), 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_map_single_worker() {
        let out = parallel_map(vec![1, 2, 3], 1, |x| x + 1);
        assert_eq!(out, vec![2, 3, 4]);
    }

    fn one_scene_plan() -> ScenePlan {
        ScenePlan {
            question_id: "q".into(),
            scenes: vec![Scene {
                index: 1,
                title: "Forces".into(),
                purpose: String::new(),
                description: String::new(),
                layout: String::new(),
                narration: "n".into(),
            }],
            raw_text: String::new(),
        }
    }

    fn analysis(position: ScreenshotPosition, evaluable: bool, issues: &[&str]) -> VisualAnalysis {
        let metric = evaluable.then_some(3u8);
        VisualAnalysis {
            scene_index: 1,
            position,
            evaluable,
            layout_quality: metric,
            text_readability: metric,
            equation_rendering: metric,
            off_screen_issues: metric,
            scene_content_alignment: metric,
            evidence: BTreeMap::new(),
            issues: issues.iter().map(|s| s.to_string()).collect(),
            suggestions: vec!["use arrange".to_string()],
            confidence: 3,
            reason: None,
            vqs: evaluable.then_some(3.0),
        }
    }

    #[test]
    fn feedback_aggregation_dedups_and_tags_scene() {
        let plan = one_scene_plan();
        let analyses = vec![
            analysis(ScreenshotPosition::Start, true, &["high overlap detected"]),
            analysis(
                ScreenshotPosition::Middle,
                true,
                &["high overlap detected", "text too small"],
            ),
        ];
        let feedback = Pipeline::aggregate_visual_feedback(&plan, &analyses).unwrap();
        assert!(feedback.contains("Scene1 (Forces):"));
        assert_eq!(feedback.matches("high overlap detected").count(), 1);
        assert!(feedback.contains("text too small"));
        assert_eq!(feedback.matches("use arrange").count(), 1);
    }

    #[test]
    fn feedback_none_when_nothing_evaluable() {
        let plan = one_scene_plan();
        let analyses = vec![analysis(ScreenshotPosition::Start, false, &[])];
        assert_eq!(Pipeline::aggregate_visual_feedback(&plan, &analyses), None);
    }
}
