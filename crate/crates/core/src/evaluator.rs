//! Computes all fifteen sub-metrics and the weighted overall score for a
//! generated video.
//!
//! Scoring model: each screenshot's visual quality is the mean of its two
//! lowest sub-metrics; a scene pools its evaluable screenshots by mean; the
//! video pools scenes by mean-of-means so scenes with fewer evaluable
//! screenshots are not underweighted. The overall score combines the four
//! components at fixed 5/10/60/25 weights.

use crate::domain::{
    weighted_overall, JudgeEvaluation, JudgeKind, PhysicsQuestion, ScenePlan, StructuredSolution,
    VisualAnalysis,
};
use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole, RoleConfig};
use crate::parsers::{self, ParseError};
use crate::prompts::{self, PromptName};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("judge prompt: {0}")]
    Prompt(#[from] prompts::PromptError),
    #[error("judge call: {0}")]
    Gateway(#[from] GatewayError),
    #[error("judge reply unparseable after retry: {0}")]
    Parse(#[from] ParseError),
    #[error("component score out of range: {0}={1}")]
    OutOfRange(&'static str, f64),
}

const RETRY_SUFFIX: &str = "\n\nIMPORTANT: Your previous reply was not valid JSON for the required schema. Return ONLY the JSON object, with every key from the schema.";

fn judge_call(
    gateway: &Gateway,
    config: &RoleConfig,
    name: PromptName,
    prompt: String,
    kind: JudgeKind,
) -> Result<JudgeEvaluation, EvaluatorError> {
    let request = ModelRequest::text(
        ModelRole::Judge,
        config.clone(),
        name.as_str(),
        prompt.clone(),
    );
    let reply = gateway.complete(&request)?;
    match parsers::parse_judge_json(&reply.text, kind) {
        Ok(eval) => Ok(eval),
        Err(_) => {
            // One re-ask with an appended format reminder.
            let retry = ModelRequest::text(
                ModelRole::Judge,
                config.clone(),
                name.as_str(),
                format!("{prompt}{RETRY_SUFFIX}"),
            );
            let reply = gateway.complete(&retry)?;
            Ok(parsers::parse_judge_json(&reply.text, kind)?)
        }
    }
}

/// Scores the structured solution against the five-part physics rubric.
pub fn judge_solution(
    gateway: &Gateway,
    config: &RoleConfig,
    question: &PhysicsQuestion,
    solution: &StructuredSolution,
) -> Result<JudgeEvaluation, EvaluatorError> {
    let bindings: BTreeMap<&str, String> = [
        ("question", question.text.clone()),
        ("solution", solution.raw_text.clone()),
    ]
    .into_iter()
    .collect();
    let prompt = prompts::render(PromptName::JudgeSolution, &bindings)?;
    judge_call(
        gateway,
        config,
        PromptName::JudgeSolution,
        prompt,
        JudgeKind::Solution,
    )
}

/// Scores the scene plan against the five-part pedagogy rubric.
pub fn judge_explanation(
    gateway: &Gateway,
    config: &RoleConfig,
    question: &PhysicsQuestion,
    solution: &StructuredSolution,
    plan: &ScenePlan,
) -> Result<JudgeEvaluation, EvaluatorError> {
    let bindings: BTreeMap<&str, String> = [
        ("question", question.text.clone()),
        ("solution", solution.raw_text.clone()),
        ("scene_plan", plan.raw_text.clone()),
    ]
    .into_iter()
    .collect();
    let prompt = prompts::render(PromptName::JudgeExplanation, &bindings)?;
    judge_call(
        gateway,
        config,
        PromptName::JudgeExplanation,
        prompt,
        JudgeKind::Explanation,
    )
}

/// Mean screenshot vqs for one scene; `None` when no screenshot was
/// evaluable.
pub fn scene_vqs(analyses: &[VisualAnalysis]) -> Option<f64> {
    let values: Vec<f64> = analyses.iter().filter_map(|a| a.vqs).collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Video-level visual quality: mean over scenes with an evaluable vqs plus
/// the per-scene maximum. When nothing is evaluable the score degrades
/// conservatively to zero and the caller should set a flag.
pub fn video_visual_quality(per_scene: &[Option<f64>]) -> (f64, Option<f64>) {
    let values: Vec<f64> = per_scene.iter().flatten().copied().collect();
    if values.is_empty() {
        return (0.0, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, Some(max))
}

/// Error penalty on the 0-5 scale: each repair attempt costs half a point
/// and each aborted scene two, floored at zero. Coefficients are chosen so
/// a fully exhausted repair loop on one scene costs two points.
pub fn error_penalty_score(fix_attempts_total: u64, scenes_aborted: u64) -> f64 {
    (5.0 - 0.5 * fix_attempts_total as f64 - 2.0 * scenes_aborted as f64).max(0.0)
}

/// The 5/10/60/25 weighted combination of the four components.
pub fn overall_score(sq: f64, eq: f64, vq: f64, ep: f64) -> Result<f64, EvaluatorError> {
    for (name, value) in [("SQ", sq), ("EQ", eq), ("VQ", vq), ("EP", ep)] {
        if !(0.0..=5.0).contains(&value) {
            return Err(EvaluatorError::OutOfRange(name, value));
        }
    }
    Ok(weighted_overall(sq, eq, vq, ep))
}

/// Pooled mean of each visual sub-metric over evaluable screenshots, in
/// rubric order, for the report columns. Zeros when nothing is evaluable.
pub fn visual_sub_metric_means(analyses: &[VisualAnalysis]) -> [f64; 5] {
    let mut sums = [0.0f64; 5];
    let mut count = 0u32;
    for a in analyses.iter().filter(|a| a.evaluable) {
        let m = a.metrics();
        for (i, v) in m.iter().enumerate() {
            sums[i] += f64::from(v.unwrap_or(0));
        }
        count += 1;
    }
    if count == 0 {
        return [0.0; 5];
    }
    sums.map(|s| s / f64::from(count))
}
