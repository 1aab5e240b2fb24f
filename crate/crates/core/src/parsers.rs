//! Converts structured LLM output into domain types: delimited solution
//! text, delimited scene plans, fenced code blocks, and strict judge JSON.
//!
//! All parsers are pure functions. Tolerances are strictly widening: prose
//! around a JSON object is skipped, label matching is case-insensitive
//! with flexible whitespace, and bracketed blocks that carry no labeled
//! field at all (the "...continue..." ellipsis style) are treated as
//! filler rather than content.

use crate::domain::{
    JudgeEvaluation, JudgeKind, Scene, ScenePlan, ScreenshotPosition, SolutionStep,
    StructuredSolution, VisualAnalysis,
};
use regex::Regex;
use serde_json::Value;
use std::collections::BTreeMap;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("missing delimiter: {0}")]
    MissingDelimiter(&'static str),
    #[error("delimited region contains no step header")]
    NoSteps,
    #[error("delimited region contains no scene header")]
    NoScenes,
    #[error("scene {0} is missing required field '{1}'")]
    MissingField(u32, &'static str),
    #[error("no code block found in reply")]
    NoCode,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing metric '{0}'")]
    MissingMetric(String),
    #[error("metric '{0}' out of range: {1}")]
    OutOfRange(String, f64),
    #[error("metric '{0}' must be a whole number, got {1}")]
    NonIntegerMetric(String, f64),
    #[error("evaluable flag contradicts metric nullness: {0}")]
    MixedNullness(String),
}

const SOLUTION_BEGIN: &str = "SOLUTION BEGIN";
const SOLUTION_END: &str = "SOLUTION END";
const PLAN_BEGIN: &str = "SCENE PLAN BEGIN";
const PLAN_END: &str = "SCENE PLAN END";

fn delimited_region<'a>(
    raw: &'a str,
    begin: &'static str,
    end: &'static str,
) -> Result<&'a str, ParseError> {
    let start = raw.find(begin).ok_or(ParseError::MissingDelimiter(begin))?;
    let after = start + begin.len();
    let stop = raw[after..]
        .find(end)
        .ok_or(ParseError::MissingDelimiter(end))?;
    let mut region = &raw[after..after + stop];
    // Skip the optional colon right after the opening delimiter.
    region = region.strip_prefix(':').unwrap_or(region);
    Ok(region)
}

fn header_regex(word: &str) -> Regex {
    Regex::new(&format!(
        r"(?mi)^[ \t]*\[\s*{word}\s+(\d+)\s*\][ \t]*:?[ \t]*$"
    ))
    .unwrap()
}

/// Splits a delimited region into bracket-headed blocks, dropping anything
/// before the first header.
fn split_blocks<'a>(region: &'a str, header: &Regex) -> Vec<&'a str> {
    let mut starts: Vec<usize> = header.find_iter(region).map(|m| m.end()).collect();
    if starts.is_empty() {
        return Vec::new();
    }
    starts.push(region.len());
    let bounds: Vec<usize> = header.find_iter(region).map(|m| m.start()).collect();
    let mut blocks = Vec::new();
    for i in 0..bounds.len() {
        let body_start = starts[i];
        let body_end = if i + 1 < bounds.len() {
            bounds[i + 1]
        } else {
            region.len()
        };
        blocks.push(&region[body_start..body_end]);
    }
    blocks
}

/// Captures labeled fields from a block. Lines that match no label attach
/// to the field opened by the preceding label; leading unlabeled prose is
/// dropped. Returns `None` when the block contains no label at all.
fn capture_fields(block: &str, labels: &[(&str, Regex)]) -> Option<BTreeMap<String, String>> {
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut any = false;
    for line in block.lines() {
        let mut matched = false;
        for (key, re) in labels {
            if let Some(c) = re.captures(line) {
                let value = c.get(1).map(|m| m.as_str()).unwrap_or("").trim_end();
                fields.insert((*key).to_string(), value.to_string());
                current = Some((*key).to_string());
                matched = true;
                any = true;
                break;
            }
        }
        if !matched {
            if let Some(key) = &current {
                let entry = fields.get_mut(key).expect("current field exists");
                if !entry.is_empty() || !line.trim().is_empty() {
                    if !entry.is_empty() {
                        entry.push('\n');
                    }
                    entry.push_str(line.trim_end());
                }
            }
        }
    }
    if !any {
        return None;
    }
    for v in fields.values_mut() {
        *v = v.trim().to_string();
    }
    Some(fields)
}

fn label_regex(label: &str) -> Regex {
    // Case-insensitive label at line start; arbitrary run-length whitespace
    // around the slash and after the colon, as seen in the templates
    // themselves.
    let pattern = label.replace('/', r"\s*/\s*");
    Regex::new(&format!(r"(?i)^[ \t]*{pattern}[ \t]*:\s*(.*)$")).unwrap()
}

fn solution_labels() -> &'static Vec<(&'static str, Regex)> {
    static LABELS: OnceLock<Vec<(&'static str, Regex)>> = OnceLock::new();
    LABELS.get_or_init(|| {
        vec![
            ("approach", label_regex("Approach/Concept")),
            ("formula", label_regex("Equation/Formula")),
            ("calculation", label_regex("Calculation")),
            ("explanation", label_regex("Explanation")),
            ("visualization", label_regex("Visualization")),
        ]
    })
}

fn scene_labels() -> &'static Vec<(&'static str, Regex)> {
    static LABELS: OnceLock<Vec<(&'static str, Regex)>> = OnceLock::new();
    LABELS.get_or_init(|| {
        vec![
            ("title", label_regex("Title")),
            ("purpose", label_regex("Purpose")),
            ("description", label_regex("Description")),
            ("layout", label_regex("Layout")),
            ("narration", label_regex("Narration")),
        ]
    })
}

/// Parses a delimited step-by-step solution reply.
pub fn parse_solution(raw: &str, question_id: &str) -> Result<StructuredSolution, ParseError> {
    let region = delimited_region(raw, SOLUTION_BEGIN, SOLUTION_END)?;
    let header = header_regex("Step");
    let blocks = split_blocks(region, &header);
    if blocks.is_empty() {
        return Err(ParseError::NoSteps);
    }
    let mut steps = Vec::new();
    for block in blocks {
        let Some(fields) = capture_fields(block, solution_labels()) else {
            continue; // ellipsis filler such as "...continue with all steps..."
        };
        let get = |k: &str| fields.get(k).cloned().unwrap_or_default();
        steps.push(SolutionStep {
            index: steps.len() as u32 + 1,
            approach: get("approach"),
            formula: get("formula"),
            calculation: get("calculation"),
            explanation: get("explanation"),
            visualization: get("visualization"),
        });
    }
    if steps.is_empty() {
        return Err(ParseError::NoSteps);
    }
    Ok(StructuredSolution {
        question_id: question_id.to_string(),
        steps,
        raw_text: raw.to_string(),
    })
}

/// Renders a solution back into the delimited wire format.
pub fn format_solution(solution: &StructuredSolution) -> String {
    let mut out = String::from("SOLUTION BEGIN:\n");
    for step in &solution.steps {
        out.push_str(&format!("[Step {}]\n", step.index));
        out.push_str(&format!("Approach/Concept: {}\n", step.approach));
        out.push_str(&format!("Equation/Formula: {}\n", step.formula));
        out.push_str(&format!("Calculation: {}\n", step.calculation));
        out.push_str(&format!("Explanation: {}\n", step.explanation));
        out.push_str(&format!("Visualization: {}\n", step.visualization));
        out.push('\n');
    }
    out.push_str("SOLUTION END:\n");
    out
}

fn strip_surrounding_quotes(s: &str) -> &str {
    let t = s.trim();
    for (open, close) in [("\"", "\""), ("\u{201c}", "\u{201d}")] {
        if t.len() >= open.len() + close.len() && t.starts_with(open) && t.ends_with(close) {
            return &t[open.len()..t.len() - close.len()];
        }
    }
    t
}

/// Parses a delimited scene-plan reply.
pub fn parse_scene_plan(raw: &str, question_id: &str) -> Result<ScenePlan, ParseError> {
    let region = delimited_region(raw, PLAN_BEGIN, PLAN_END)?;
    let header = header_regex("Scene");
    let blocks = split_blocks(region, &header);
    if blocks.is_empty() {
        return Err(ParseError::NoScenes);
    }
    let mut scenes = Vec::new();
    for block in blocks {
        let Some(fields) = capture_fields(block, scene_labels()) else {
            continue;
        };
        let index = scenes.len() as u32 + 1;
        let get = |k: &str| fields.get(k).cloned().unwrap_or_default();
        let title = get("title");
        if title.is_empty() {
            return Err(ParseError::MissingField(index, "title"));
        }
        let narration = strip_surrounding_quotes(&get("narration")).to_string();
        if narration.is_empty() {
            return Err(ParseError::MissingField(index, "narration"));
        }
        scenes.push(Scene {
            index,
            title,
            purpose: get("purpose"),
            description: get("description"),
            layout: get("layout"),
            narration,
        });
    }
    if scenes.is_empty() {
        return Err(ParseError::NoScenes);
    }
    Ok(ScenePlan {
        question_id: question_id.to_string(),
        scenes,
        raw_text: raw.to_string(),
    })
}

/// Renders a scene plan back into the delimited wire format.
pub fn format_scene_plan(plan: &ScenePlan) -> String {
    let mut out = String::from("SCENE PLAN BEGIN:\n");
    for scene in &plan.scenes {
        out.push_str(&format!("[Scene {}]\n", scene.index));
        out.push_str(&format!("Title: {}\n", scene.title));
        out.push_str(&format!("Purpose: {}\n", scene.purpose));
        out.push_str(&format!("Description: {}\n", scene.description));
        out.push_str(&format!("Layout: {}\n", scene.layout));
        out.push_str(&format!("Narration: \"{}\"\n", scene.narration));
        out.push('\n');
    }
    out.push_str("SCENE PLAN END:\n");
    out
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Advisory checks on a parsed plan. Warnings, never failures.
pub fn lint_scene_plan(plan: &ScenePlan) -> Vec<String> {
    let mut warnings = Vec::new();
    let n = plan.scenes.len();
    if !(6..=12).contains(&n) {
        warnings.push(format!(
            "scene count {n} outside the recommended 6-12 range"
        ));
    }
    for scene in &plan.scenes {
        let words = word_count(&scene.narration);
        if !(20..=40).contains(&words) {
            warnings.push(format!(
                "scene {} narration is {} words, outside the recommended 20-40",
                scene.index, words
            ));
        }
        if word_count(&scene.title) > 5 {
            warnings.push(format!("scene {} title exceeds 5 words", scene.index));
        }
    }
    warnings
}

/// Extracts renderer source from a coder reply: the longest fenced block,
/// or the whole text when it plainly starts with an import.
pub fn extract_code(raw: &str) -> Result<String, ParseError> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let fence = FENCE.get_or_init(|| {
        Regex::new(r"(?ms)^[ \t]*```[A-Za-z0-9_+-]*[ \t]*\r?\n(.*?)^[ \t]*```[ \t]*$").unwrap()
    });
    let mut best: Option<&str> = None;
    for c in fence.captures_iter(raw) {
        let body = c.get(1).unwrap().as_str();
        if best.is_none_or(|b| body.len() > b.len()) {
            best = Some(body);
        }
    }
    if let Some(body) = best {
        return Ok(body.trim_matches('\n').trim_end().to_string());
    }
    let trimmed = raw.trim();
    if trimmed.starts_with("import ") || trimmed.starts_with("from ") {
        return Ok(trimmed.to_string());
    }
    Err(ParseError::NoCode)
}

/// Balanced `{...}` region starting at byte `start`, tracking string
/// literals and escapes. `None` when the braces never close.
fn balanced_region_at(raw: &str, start: usize) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Locates the outermost balanced `{...}` region that parses as a JSON
/// object, tolerating prose or code fences around it (including stray
/// brace tokens in the surrounding prose).
fn json_object(raw: &str) -> Result<serde_json::Map<String, Value>, ParseError> {
    let mut saw_brace = false;
    let mut last_error = None;
    for (start, _) in raw.match_indices('{') {
        saw_brace = true;
        let Some(region) = balanced_region_at(raw, start) else {
            continue;
        };
        match serde_json::from_str::<Value>(region) {
            Ok(Value::Object(map)) => return Ok(map),
            Ok(_) => continue,
            Err(e) => last_error = Some(e.to_string()),
        }
    }
    if !saw_brace {
        return Err(ParseError::MalformedJson("no '{' found".to_string()));
    }
    Err(ParseError::MalformedJson(
        last_error.unwrap_or_else(|| "unbalanced braces".to_string()),
    ))
}

fn string_list(map: &serde_json::Map<String, Value>, key: &str) -> Vec<String> {
    map.get(key)
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(Value::as_str)
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

fn number_field(map: &serde_json::Map<String, Value>, key: &str) -> Option<f64> {
    map.get(key).and_then(Value::as_f64)
}

/// Parses a strict-JSON judge reply, recomputing `overall` as the mean of
/// the five sub-scores rather than trusting the model's arithmetic.
pub fn parse_judge_json(raw: &str, kind: JudgeKind) -> Result<JudgeEvaluation, ParseError> {
    let map = json_object(raw)?;
    let mut sub_scores = BTreeMap::new();
    let mut evidences = BTreeMap::new();
    for name in kind.metric_names() {
        let value = match map.get(name) {
            None => return Err(ParseError::MissingMetric(name.to_string())),
            Some(v) => v.as_f64().ok_or_else(|| {
                ParseError::MalformedJson(format!("metric '{name}' is not a number"))
            })?,
        };
        if !(0.0..=5.0).contains(&value) {
            return Err(ParseError::OutOfRange(name.to_string(), value));
        }
        sub_scores.insert(name.to_string(), value);
        // The solution-judge template's JSON schema spells one evidence key
        // "step_completness_evidence"; accept both spellings.
        let canonical = format!("{name}_evidence");
        let evidence = map
            .get(canonical.as_str())
            .or_else(|| {
                (name == "step_completeness")
                    .then(|| map.get("step_completness_evidence"))
                    .flatten()
            })
            .and_then(Value::as_str);
        if let Some(e) = evidence {
            evidences.insert(name.to_string(), e.to_string());
        }
    }
    let overall = sub_scores.values().sum::<f64>() / sub_scores.len() as f64;
    Ok(JudgeEvaluation {
        kind,
        sub_scores,
        evidences,
        overall,
        strengths: string_list(&map, "strengths"),
        weaknesses: string_list(&map, "weaknesses"),
        suggestions: string_list(&map, "suggestions"),
        confidence: number_field(&map, "confidence").unwrap_or(0.0),
        feedback: map
            .get("feedback")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
    })
}

const VISUAL_METRICS: [&str; 5] = [
    "layout_quality",
    "text_readability",
    "equation_rendering",
    "off_screen_issues",
    "scene_content_alignment",
];

/// Mean of the two smallest values of a five-metric vector.
pub fn lowest_two_mean(metrics: [u8; 5]) -> f64 {
    let mut v = metrics;
    v.sort_unstable();
    f64::from(v[0] + v[1]) / 2.0
}

/// Parses a vision-judge reply for one screenshot. Any model-supplied
/// `visual_quality_score` is discarded; the score is always recomputed as
/// the mean of the two lowest metrics.
pub fn parse_visual_json(
    raw: &str,
    scene_index: u32,
    position: ScreenshotPosition,
) -> Result<VisualAnalysis, ParseError> {
    let map = json_object(raw)?;
    let evaluable = map
        .get("evaluable")
        .and_then(Value::as_bool)
        .ok_or_else(|| ParseError::MalformedJson("missing boolean 'evaluable'".to_string()))?;

    let mut values: Vec<Option<u8>> = Vec::with_capacity(5);
    for name in VISUAL_METRICS {
        match map.get(name) {
            None | Some(Value::Null) => {
                if evaluable {
                    return Err(ParseError::MixedNullness(format!(
                        "evaluable=true but '{name}' is null"
                    )));
                }
                values.push(None);
            }
            Some(v) => {
                let n = v.as_f64().ok_or_else(|| {
                    ParseError::MalformedJson(format!("metric '{name}' is not a number"))
                })?;
                if !evaluable {
                    return Err(ParseError::MixedNullness(format!(
                        "evaluable=false but '{name}' is {n}"
                    )));
                }
                if n.fract() != 0.0 {
                    return Err(ParseError::NonIntegerMetric(name.to_string(), n));
                }
                if !(0.0..=5.0).contains(&n) {
                    return Err(ParseError::OutOfRange(name.to_string(), n));
                }
                values.push(Some(n as u8));
            }
        }
    }

    let mut evidence = BTreeMap::new();
    for name in VISUAL_METRICS {
        if let Some(e) = map.get(&format!("{name}_evidence")).and_then(Value::as_str) {
            evidence.insert(name.to_string(), e.to_string());
        }
    }

    let vqs = if evaluable {
        let m: Vec<u8> = values.iter().map(|v| v.unwrap()).collect();
        Some(lowest_two_mean([m[0], m[1], m[2], m[3], m[4]]))
    } else {
        None
    };

    Ok(VisualAnalysis {
        scene_index,
        position,
        evaluable,
        layout_quality: values[0],
        text_readability: values[1],
        equation_rendering: values[2],
        off_screen_issues: values[3],
        scene_content_alignment: values[4],
        evidence,
        issues: string_list(&map, "issues"),
        suggestions: string_list(&map, "suggestions"),
        confidence: number_field(&map, "confidence")
            .unwrap_or(0.0)
            .clamp(0.0, 5.0) as u8,
        reason: map
            .get("reason")
            .and_then(Value::as_str)
            .map(str::to_string),
        vqs,
    })
}
