//! The eight prompt templates, shipped verbatim as plain-text assets and
//! rendered by substituting named `{placeholder}` slots.
//!
//! Only declared placeholder names are ever substituted; the judge
//! templates contain many literal JSON braces that must survive rendering
//! byte-for-byte.

use std::collections::BTreeMap;
use thiserror::Error;

/// Logical name of a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptName {
    Solution,
    ScenePlan,
    Codegen,
    ErrorFix,
    VisualImprove,
    JudgeSolution,
    JudgeExplanation,
    ScreenshotAnalysis,
}

impl PromptName {
    pub const ALL: [PromptName; 8] = [
        PromptName::Solution,
        PromptName::ScenePlan,
        PromptName::Codegen,
        PromptName::ErrorFix,
        PromptName::VisualImprove,
        PromptName::JudgeSolution,
        PromptName::JudgeExplanation,
        PromptName::ScreenshotAnalysis,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptName::Solution => "solution",
            PromptName::ScenePlan => "scene_plan",
            PromptName::Codegen => "codegen",
            PromptName::ErrorFix => "error_fix",
            PromptName::VisualImprove => "visual_improve",
            PromptName::JudgeSolution => "judge_solution",
            PromptName::JudgeExplanation => "judge_explanation",
            PromptName::ScreenshotAnalysis => "screenshot_analysis",
        }
    }

    pub fn parse(s: &str) -> Option<PromptName> {
        PromptName::ALL.iter().copied().find(|n| n.as_str() == s)
    }
}

impl std::fmt::Display for PromptName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A template body plus its declared placeholder set.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: PromptName,
    pub body: &'static str,
    pub placeholders: &'static [&'static str],
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),
}

const SOLUTION: &str = include_str!("../assets/prompts/solution.txt");
const SCENE_PLAN: &str = include_str!("../assets/prompts/scene_plan.txt");
const CODEGEN: &str = include_str!("../assets/prompts/codegen.txt");
const ERROR_FIX: &str = include_str!("../assets/prompts/error_fix.txt");
const VISUAL_IMPROVE: &str = include_str!("../assets/prompts/visual_improve.txt");
const JUDGE_SOLUTION: &str = include_str!("../assets/prompts/judge_solution.txt");
const JUDGE_EXPLANATION: &str = include_str!("../assets/prompts/judge_explanation.txt");
const SCREENSHOT_ANALYSIS: &str = include_str!("../assets/prompts/screenshot_analysis.txt");

/// Looks up a template by name.
pub fn template(name: PromptName) -> PromptTemplate {
    let (body, placeholders): (&'static str, &'static [&'static str]) = match name {
        PromptName::Solution => (SOLUTION, &["question_text"]),
        PromptName::ScenePlan => (SCENE_PLAN, &["question", "solution"]),
        PromptName::Codegen => (CODEGEN, &["question", "solution", "scene_plan"]),
        PromptName::ErrorFix => (ERROR_FIX, &["scene_plan", "code", "error_message"]),
        PromptName::VisualImprove => (VISUAL_IMPROVE, &["scene_plan", "code", "visual_feedback"]),
        PromptName::JudgeSolution => (JUDGE_SOLUTION, &["question", "solution"]),
        PromptName::JudgeExplanation => {
            (JUDGE_EXPLANATION, &["question", "solution", "scene_plan"])
        }
        PromptName::ScreenshotAnalysis => (
            SCREENSHOT_ANALYSIS,
            &["scene_index", "scene_data", "timestamp_label"],
        ),
    };
    PromptTemplate {
        name,
        body,
        placeholders,
    }
}

/// Renders a template by substituting every declared placeholder. Fails if
/// any declared placeholder is unbound; bindings for names the template
/// does not declare are ignored.
pub fn render(name: PromptName, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let t = template(name);
    let mut out = t.body.to_string();
    for ph in t.placeholders {
        let value = bindings
            .get(ph)
            .ok_or_else(|| PromptError::MissingBinding((*ph).to_string()))?;
        out = out.replace(&format!("{{{ph}}}"), value);
    }
    Ok(out)
}

/// Renders a template identified by its string name.
pub fn render_named(name: &str, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let name =
        PromptName::parse(name).ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))?;
    render(name, bindings)
}

/// Appends retrieved documentation chunks to an already-rendered prompt.
/// With no chunks the prompt is returned unchanged. Chunk text is appended
/// verbatim, never re-templated.
pub fn append_rag_context(prompt: &str, chunks: &[(String, String)]) -> String {
    if chunks.is_empty() {
        return prompt.to_string();
    }
    let mut out = String::with_capacity(prompt.len() + 256);
    out.push_str(prompt);
    out.push_str("\n\n=== RETRIEVED DOCUMENTATION ===\n");
    for (i, (source, text)) in chunks.iter().enumerate() {
        out.push_str(&format!("\n--- [{n}] source: {source} ---\n", n = i + 1));
        out.push_str(text);
        if !text.ends_with('\n') {
            out.push('\n');
        }
    }
    out.push_str("=== END RETRIEVED DOCUMENTATION ===\n");
    out
}

/// Best-effort classification of a rendered prompt back to its template,
/// used to label cassette misses. Matches on the per-agent header lines
/// every template starts with.
pub fn identify_template(text: &str) -> Option<PromptName> {
    let head: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
    if head.contains("Agent: PhysicsSolutionAgent") {
        Some(PromptName::Solution)
    } else if head.contains("Agent: PlannerAgent") {
        Some(PromptName::ScenePlan)
    } else if head.contains("Purpose: Generate executable Manim code") {
        Some(PromptName::Codegen)
    } else if head.contains("Purpose: Debug and fix Manim code") {
        Some(PromptName::ErrorFix)
    } else if head.contains("Purpose: Improve Manim code") {
        Some(PromptName::VisualImprove)
    } else if head.contains("Agent: SolutionEvaluator") {
        Some(PromptName::JudgeSolution)
    } else if head.contains("Agent: ExplanationEvaluator") {
        Some(PromptName::JudgeExplanation)
    } else if head.contains("Agent: ScreenshotAnalyzer") {
        Some(PromptName::ScreenshotAnalysis)
    } else {
        None
    }
}
