//! Data types shared across the pipeline and the enumerations that gate
//! behavior. Everything here is an immutable value object after
//! construction and freely shareable across threads.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;

/// Weight of the solution-quality component in the overall score.
pub const WEIGHT_SOLUTION: f64 = 0.05;
/// Weight of the explanation-quality component.
pub const WEIGHT_EXPLANATION: f64 = 0.10;
/// Weight of the visual-quality component.
pub const WEIGHT_VISUAL: f64 = 0.60;
/// Weight of the error-penalty component.
pub const WEIGHT_ERROR_PENALTY: f64 = 0.25;

/// Tolerance for the weighted overall-score identity.
pub const SCORE_EPSILON: f64 = 1e-9;

/// Hard cap on render attempts per scene, counting the first try.
pub const MAX_ATTEMPTS: u32 = 5;

/// Difficulty / type label of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Easy,
    Medium,
    Hard,
    Theorem,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Easy,
        Category::Medium,
        Category::Hard,
        Category::Theorem,
    ];

    pub fn parse(s: &str) -> Option<Category> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Some(Category::Easy),
            "medium" => Some(Category::Medium),
            "hard" => Some(Category::Hard),
            "theorem" => Some(Category::Theorem),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Easy => "Easy",
            Category::Medium => "Medium",
            Category::Hard => "Hard",
            Category::Theorem => "Theorem",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pipeline output version: v1 is the first full render, v2 the visually
/// refined pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    V1,
    V2,
}

impl Version {
    pub fn as_str(&self) -> &'static str {
        match self {
            Version::V1 => "v1",
            Version::V2 => "v2",
        }
    }

    pub fn parse(s: &str) -> Option<Version> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Some(Version::V1),
            "v2" => Some(Version::V2),
            _ => None,
        }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A question to explain, with a stable identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsQuestion {
    pub id: String,
    pub text: String,
    pub category: Category,
}

impl PhysicsQuestion {
    /// Builds a question, deriving the id from a content hash of the text
    /// when the caller does not supply one. Hash-derived ids are stable
    /// across reruns of the same question.
    pub fn new(id: Option<String>, text: impl Into<String>, category: Category) -> Self {
        let text = text.into();
        let id = id.unwrap_or_else(|| derive_question_id(&text));
        PhysicsQuestion { id, text, category }
    }
}

/// Content-hash id for a question: first 12 hex chars of sha-256 over the
/// trimmed text.
pub fn derive_question_id(text: &str) -> String {
    let digest = Sha256::digest(text.trim().as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("q{}", &hex[..12])
}

/// One step of a structured solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionStep {
    pub index: u32,
    pub approach: String,
    pub formula: String,
    pub calculation: String,
    pub explanation: String,
    pub visualization: String,
}

/// Parsed step-by-step solution; the ground truth for all later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredSolution {
    pub question_id: String,
    pub steps: Vec<SolutionStep>,
    pub raw_text: String,
}

/// One logical segment of the explainer video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: u32,
    pub title: String,
    pub purpose: String,
    pub description: String,
    pub layout: String,
    pub narration: String,
}

/// Ordered blueprint of scenes produced by the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlan {
    pub question_id: String,
    pub scenes: Vec<Scene>,
    pub raw_text: String,
}

/// How a scene script came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    ErrorFixed,
    VisuallyImproved,
}

/// Renderer source text for one scene at one attempt. The source holds all
/// scene classes; `scene_index` names the one this script is being run for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub scene_index: u32,
    pub source: String,
    pub attempt: u32,
    pub provenance: Provenance,
}

/// Outcome of executing a renderer script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderStatus {
    Success,
    Failed,
    Aborted,
}

/// Result of rendering one scene, across however many attempts were used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResult {
    pub scene_index: u32,
    pub status: RenderStatus,
    pub stderr: String,
    pub video_path: Option<String>,
    pub duration_s: f64,
    pub attempts_used: u32,
    pub wall_time_s: f64,
}

/// Where in the scene a screenshot was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreenshotPosition {
    Start,
    Middle,
    End,
}

impl ScreenshotPosition {
    pub const ALL: [ScreenshotPosition; 3] = [
        ScreenshotPosition::Start,
        ScreenshotPosition::Middle,
        ScreenshotPosition::End,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ScreenshotPosition::Start => "start",
            ScreenshotPosition::Middle => "middle",
            ScreenshotPosition::End => "end",
        }
    }
}

/// One extracted frame of a rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screenshot {
    pub scene_index: u32,
    pub position: ScreenshotPosition,
    pub timestamp_s: f64,
    pub image_path: String,
}

/// Vision-judge verdict for one screenshot. When `evaluable` is false all
/// five metrics and `vqs` are `None`; when true, all five are whole numbers
/// in `[0,5]` and `vqs` is the mean of the two smallest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualAnalysis {
    pub scene_index: u32,
    pub position: ScreenshotPosition,
    pub evaluable: bool,
    pub layout_quality: Option<u8>,
    pub text_readability: Option<u8>,
    pub equation_rendering: Option<u8>,
    pub off_screen_issues: Option<u8>,
    pub scene_content_alignment: Option<u8>,
    pub evidence: BTreeMap<String, String>,
    pub issues: Vec<String>,
    pub suggestions: Vec<String>,
    pub confidence: u8,
    pub reason: Option<String>,
    pub vqs: Option<f64>,
}

impl VisualAnalysis {
    pub fn metrics(&self) -> [Option<u8>; 5] {
        [
            self.layout_quality,
            self.text_readability,
            self.equation_rendering,
            self.off_screen_issues,
            self.scene_content_alignment,
        ]
    }

    /// Checks the evaluable ⇔ all-metrics-null biconditional and the
    /// lowest-two vqs identity.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let metrics = self.metrics();
        if self.evaluable {
            if metrics.iter().any(|m| m.is_none()) {
                v.push("evaluable analysis has a null metric".to_string());
            } else {
                let mut vals: Vec<u8> = metrics.iter().map(|m| m.unwrap()).collect();
                if vals.iter().any(|&x| x > 5) {
                    v.push("metric outside [0,5]".to_string());
                }
                vals.sort_unstable();
                let expect = f64::from(vals[0] + vals[1]) / 2.0;
                match self.vqs {
                    Some(got) if (got - expect).abs() <= SCORE_EPSILON => {}
                    _ => v.push("vqs is not the mean of the two smallest metrics".to_string()),
                }
            }
        } else {
            if metrics.iter().any(|m| m.is_some()) {
                v.push("non-evaluable analysis carries a metric value".to_string());
            }
            if self.vqs.is_some() {
                v.push("non-evaluable analysis carries a vqs".to_string());
            }
        }
        v
    }
}

/// Which rubric a judge evaluation used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Solution,
    Explanation,
}

impl JudgeKind {
    /// The five rubric metric names, in report order.
    pub fn metric_names(&self) -> [&'static str; 5] {
        match self {
            JudgeKind::Solution => [
                "equation_correctness",
                "numerical_accuracy",
                "step_completeness",
                "concept_coverage",
                "mathematical_rigor",
            ],
            JudgeKind::Explanation => [
                "logical_flow",
                "pedagogical_clarity",
                "visualization_alignment",
                "intuition_building",
                "pacing_accessibility",
            ],
        }
    }
}

/// Rubric verdict from an LLM judge. `overall` is always recomputed as the
/// arithmetic mean of the five sub-scores rather than trusted from the
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeEvaluation {
    pub kind: JudgeKind,
    pub sub_scores: BTreeMap<String, f64>,
    pub evidences: BTreeMap<String, String>,
    pub overall: f64,
    pub strengths: Vec<String>,
    pub weaknesses: Vec<String>,
    pub suggestions: Vec<String>,
    pub confidence: f64,
    pub feedback: String,
}

/// Component and overall scores for one generated video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEvaluation {
    pub solution_score: f64,
    pub explanation_score: f64,
    pub visual_quality: f64,
    pub error_penalty_score: f64,
    pub overall_score: f64,
    pub max_scene_vqs: Option<f64>,
    pub per_scene_vqs: Vec<Option<f64>>,
}

/// Weighted combination identity check.
pub fn weighted_overall(sq: f64, eq: f64, vq: f64, ep: f64) -> f64 {
    WEIGHT_SOLUTION * sq + WEIGHT_EXPLANATION * eq + WEIGHT_VISUAL * vq + WEIGHT_ERROR_PENALTY * ep
}

/// One cumulative-CSV row. Deliberately loosely typed (category is a plain
/// string) so that rows read back from disk can be validated rather than
/// rejected at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question_id: String,
    pub category: String,
    pub version: Version,
    pub started_at: String,
    pub finished_at: String,
    pub solve_s: f64,
    pub plan_s: f64,
    pub code_s: f64,
    pub render_s: f64,
    pub refine_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
    pub fix_attempts_total: i64,
    pub scenes_aborted: i64,
    /// Solution sub-scores, explanation sub-scores, then visual sub-metric
    /// means, in the order of [`sub_metric_names`].
    pub sub_metrics: Vec<f64>,
    pub solution_score: f64,
    pub explanation_score: f64,
    pub visual_quality: f64,
    pub error_penalty_score: f64,
    pub overall_score: f64,
    pub max_scene_vqs: Option<f64>,
    pub flags: Vec<String>,
    pub top_issues: Vec<String>,
}

/// The fifteen sub-metric names in CSV column order.
pub fn sub_metric_names() -> [&'static str; 15] {
    [
        "sol_equation_correctness",
        "sol_numerical_accuracy",
        "sol_step_completeness",
        "sol_concept_coverage",
        "sol_mathematical_rigor",
        "exp_logical_flow",
        "exp_pedagogical_clarity",
        "exp_visualization_alignment",
        "exp_intuition_building",
        "exp_pacing_accessibility",
        "vis_layout_quality",
        "vis_text_readability",
        "vis_equation_rendering",
        "vis_off_screen_issues",
        "vis_scene_content_alignment",
    ]
}

/// Validates a record against the domain invariants. Violations are
/// returned as human-readable descriptions, never raised.
pub fn validate(record: &RunRecord) -> Vec<String> {
    let mut violations = Vec::new();
    if record.question_id.trim().is_empty() {
        violations.push("empty question id".to_string());
    }
    if Category::parse(&record.category).is_none() {
        violations.push("unknown category".to_string());
    }
    if record.fix_attempts_total < 0 || record.scenes_aborted < 0 {
        violations.push("negative error count".to_string());
    }
    if record.sub_metrics.len() != 15 {
        violations.push(format!(
            "expected 15 sub-metrics, found {}",
            record.sub_metrics.len()
        ));
    }
    for (name, value) in sub_metric_names().iter().zip(&record.sub_metrics) {
        if !(0.0..=5.0).contains(value) {
            violations.push(format!("{name} out of range"));
        }
    }
    for (name, value) in [
        ("solution score", record.solution_score),
        ("explanation score", record.explanation_score),
        ("visual quality", record.visual_quality),
        ("error penalty score", record.error_penalty_score),
        ("overall score", record.overall_score),
    ] {
        if !(0.0..=5.0).contains(&value) {
            violations.push(format!("{name} out of range"));
        }
    }
    if let Some(m) = record.max_scene_vqs {
        if !(0.0..=5.0).contains(&m) {
            violations.push("max scene vqs out of range".to_string());
        }
    }
    let expect = weighted_overall(
        record.solution_score,
        record.explanation_score,
        record.visual_quality,
        record.error_penalty_score,
    );
    if (record.overall_score - expect).abs() > SCORE_EPSILON {
        violations.push("overall score violates weighted identity".to_string());
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_record() -> RunRecord {
        RunRecord {
            question_id: "q1".into(),
            category: "easy".into(),
            version: Version::V1,
            started_at: "2026-01-01T00:00:00Z".into(),
            finished_at: "2026-01-01T00:10:00Z".into(),
            solve_s: 1.0,
            plan_s: 1.0,
            code_s: 1.0,
            render_s: 1.0,
            refine_s: 0.0,
            eval_s: 1.0,
            total_s: 5.0,
            fix_attempts_total: 0,
            scenes_aborted: 0,
            sub_metrics: vec![5.0; 15],
            solution_score: 5.0,
            explanation_score: 5.0,
            visual_quality: 5.0,
            error_penalty_score: 5.0,
            overall_score: weighted_overall(5.0, 5.0, 5.0, 5.0),
            max_scene_vqs: Some(5.0),
            flags: vec![],
            top_issues: vec![],
        }
    }

    #[test]
    fn clean_record_validates() {
        let record = clean_record();
        assert_eq!(record.overall_score, 5.0);
        assert!(validate(&record).is_empty());
    }

    #[test]
    fn unknown_category_is_flagged() {
        let mut record = clean_record();
        record.category = "Extreme".into();
        let violations = validate(&record);
        assert!(violations.iter().any(|v| v.contains("unknown category")));
    }

    #[test]
    fn negative_error_count_is_flagged() {
        let mut record = clean_record();
        record.fix_attempts_total = -1;
        let violations = validate(&record);
        assert!(violations
            .iter()
            .any(|v| v.contains("negative error count")));
    }

    #[test]
    fn broken_weighted_identity_is_flagged() {
        let mut record = clean_record();
        record.overall_score = 4.9;
        let violations = validate(&record);
        assert!(violations.iter().any(|v| v.contains("weighted identity")));
    }

    #[test]
    fn question_id_derivation_is_stable_and_sensitive() {
        let a = derive_question_id("A ball is thrown upward at 20 m/s.");
        let b = derive_question_id("A ball is thrown upward at 20 m/s.");
        let c = derive_question_id("A ball is thrown upward at 21 m/s.");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.starts_with('q'));
    }

    #[test]
    fn visual_analysis_biconditional() {
        let ok = VisualAnalysis {
            scene_index: 1,
            position: ScreenshotPosition::Middle,
            evaluable: true,
            layout_quality: Some(3),
            text_readability: Some(4),
            equation_rendering: Some(2),
            off_screen_issues: Some(5),
            scene_content_alignment: Some(3),
            evidence: BTreeMap::new(),
            issues: vec![],
            suggestions: vec![],
            confidence: 4,
            reason: None,
            vqs: Some(2.5),
        };
        assert!(ok.invariant_violations().is_empty());

        let mut mixed = ok.clone();
        mixed.evaluable = false;
        assert!(!mixed.invariant_violations().is_empty());
    }
}
