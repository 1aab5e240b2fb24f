//! Shared test fixtures for the workspace: a scripted model transport that
//! answers every pipeline prompt deterministically, and fake renderer /
//! ffmpeg tools implemented as POSIX shell scripts.
//!
//! The fake video "format" is a small text file carrying `scene=`, `src=`,
//! `ver=` and `duration=` fields; the fake probe/extract/concat tools parse
//! it. Frame files embed only the last three path components of their
//! source video, so recorded vision requests stay byte-identical across
//! differently-located run directories.

use psa_core::config::PipelineConfig;
use psa_core::gateway::{ModelRequest, Transport, TransportReply};
use psa_core::render::ToolConfig;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

/// How the scripted vision judge behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VisualMode {
    /// Evaluable scores that improve slightly from v1 to v2, with one
    /// "high overlap detected" issue on scene 1.
    #[default]
    Evaluable,
    /// Every screenshot judged not evaluable.
    AllNonEvaluable,
}

/// Deterministic fake model: inspects each prompt, recognizes which agent
/// template produced it, and fabricates a coherent reply.
#[derive(Default)]
pub struct ScriptedModel {
    pub scene_count: usize,
    pub visual_mode: VisualMode,
    /// First solve reply omits the END delimiter, exercising the re-ask.
    pub solution_malformed_first: bool,
    /// First solution-judge reply is prose, exercising the judge re-ask.
    pub judge_malformed_first: bool,
    calls: Mutex<BTreeMap<String, u64>>,
}

impl ScriptedModel {
    pub fn new(scene_count: usize) -> Self {
        ScriptedModel {
            scene_count,
            ..Default::default()
        }
    }

    pub fn call_counts(&self) -> BTreeMap<String, u64> {
        self.calls.lock().unwrap().clone()
    }

    fn bump(&self, key: &str) -> u64 {
        let mut calls = self.calls.lock().unwrap();
        let n = calls.entry(key.to_string()).or_insert(0);
        *n += 1;
        *n
    }

    pub fn solution_text(&self) -> String {
        let mut out = String::from("Here is the worked solution.\n\nSOLUTION BEGIN:\n");
        out.push_str(
            "[Step 1]\nApproach/Concept: Identify uniform acceleration and resolve forces along the incline.\n\
             Equation/Formula: v = u + a*t\n\
             Calculation: v = 0 + 2.0*3.0 = 6.0 m/s\n\
             Explanation: The block starts from rest, so the final speed follows from the first kinematic equation.\n\
             Visualization: Show the block on the incline with the velocity vector growing over time.\n\n",
        );
        out.push_str(
            "[Step 2]\nApproach/Concept: Cross-check with energy methods.\n\
             Equation/Formula: v^2 = u^2 + 2*a*s\n\
             Calculation: v^2 = 2*2.0*9.0 = 36, so v = 6.0 m/s\n\
             Explanation: Both kinematic routes agree, which confirms the result.\n\
             Visualization: Plot speed against time as a straight line through the origin.\n",
        );
        out.push_str("SOLUTION END:\n");
        out
    }

    pub fn plan_text(&self) -> String {
        let n = self.scene_count;
        let mut out = String::from("SCENE PLAN BEGIN:\n");
        for i in 1..=n {
            let title = match i {
                1 => "Problem Statement".to_string(),
                x if x == n => "Key Takeaways".to_string(),
                x => format!("Solution Step {}", x - 1),
            };
            let narration = if i == 1 {
                "Hello! Today we will learn how a block slides down a smooth incline and how forces produce a constant acceleration we can compute together.".to_string()
            } else if i == n {
                "That's how we solve it step by step. Compare both methods, check the units carefully, and remember energy conservation. I hope this was clear!".to_string()
            } else {
                "Notice the key forces acting here. We resolve gravity along the incline, apply Newton's second law, and watch the acceleration stay constant throughout.".to_string()
            };
            out.push_str(&format!(
                "[Scene {i}]\nTitle: {title}\nPurpose: Explain part {i} of the solution\n\
                 Description: Show the relevant equations and a force diagram for part {i}.\n\
                 Layout: Title at top, equations left, diagram right, minimum spacing between elements.\n\
                 Narration: \"{narration}\"\n\n"
            ));
        }
        out.push_str("SCENE PLAN END:\n");
        out
    }

    pub fn code_text(&self) -> String {
        let mut code = String::from(
            "from manim import *\nfrom manim_voiceover import VoiceoverScene\nimport sys\nimport os\n\
             current_dir = os.path.dirname(os.path.abspath(__file__))\n\
             project_root = os.path.abspath(os.path.join(current_dir, '../../../..'))\n\
             if project_root not in sys.path:\n    sys.path.insert(0, project_root)\n\
             from utils.kokoro_voiceover import KokoroService\n\n",
        );
        for i in 1..=self.scene_count {
            code.push_str(&format!(
                "class Scene{i}Part(VoiceoverScene):\n    def construct(self):\n        \
                 self.set_speech_service(KokoroService(voice=\"af_bella\", speed=1.0, lang=\"en-us\"))\n        \
                 title = Text(\"Part {i}\")\n        \
                 eq = MathTex(\"v = u + a t\")\n        \
                 with self.voiceover(text=\"Scene {i} narration.\") as tracker:\n            \
                 self.play(Write(title), run_time=tracker.duration)\n\n"
            ));
        }
        format!("Here is the complete script:\n\n```python\n{code}```\n")
    }

    fn echo_code_block(prompt: &str, marker: &str) -> String {
        // Pull the fenced block out of the prompt (FAILED CODE / CURRENT
        // CODE section) and hand it back with a marker appended.
        let body = prompt
            .find("```python\n")
            .and_then(|start| {
                let rest = &prompt[start + 10..];
                rest.find("\n```").map(|end| &rest[..end])
            })
            .unwrap_or("from manim import *");
        format!("```python\n{body}\n# {marker}\n```\n")
    }

    fn judge_solution_json(&self) -> String {
        serde_json::json!({
            "equation_correctness": 5,
            "equation_correctness_evidence": "Kinematic equations stated and applied correctly.",
            "numerical_accuracy": 4,
            "numerical_accuracy_evidence": "Final speed 6.0 m/s is correct; one rounding shortcut.",
            "step_completeness": 5,
            "step_completness_evidence": "Both steps present with a cross-check.",
            "concept_coverage": 4,
            "concept_coverage_evidence": "Friction explicitly ruled out, energy route covered.",
            "mathematical_rigor": 5,
            "mathematical_rigor_evidence": "Units carried through every line.",
            "overall_score": 4.6,
            "strengths": ["Clear decomposition", "Includes an independent cross-check"],
            "weaknesses": ["Minor redundancy in repeated visualization text"],
            "confidence": 5,
            "feedback": "Correct and well structured."
        })
        .to_string()
    }

    fn judge_explanation_json(&self) -> String {
        serde_json::json!({
            "logical_flow": 4,
            "logical_flow_evidence": "Scenes follow the solution order.",
            "pedagogical_clarity": 4,
            "pedagogical_clarity_evidence": "Narration guides attention without reading the board.",
            "visualization_alignment": 3,
            "visualization_alignment_evidence": "Two scenes reuse the same diagram.",
            "intuition_building": 4,
            "intuition_building_evidence": "Connects kinematics to energy methods.",
            "pacing_accessibility": 4,
            "pacing_accessibility_evidence": "Narrations fit the 20-40 word guideline.",
            "overall_score": 3.8,
            "strengths": ["Warm introduction", "Concise narration"],
            "weaknesses": ["redundancy and verbosity"],
            "suggestions": ["Condense repeated explanations"],
            "confidence": 4,
            "feedback": "Pedagogically sound plan."
        })
        .to_string()
    }

    fn visual_json(&self, prompt: &str, image_text: &str) -> String {
        if self.visual_mode == VisualMode::AllNonEvaluable {
            return serde_json::json!({
                "evaluable": false,
                "reason": "Nearly blank transition frame with a single element",
                "layout_quality": null,
                "text_readability": null,
                "equation_rendering": null,
                "off_screen_issues": null,
                "scene_content_alignment": null,
                "visual_quality_score": null,
                "confidence": 0
            })
            .to_string();
        }
        let scene_index: u32 = prompt
            .lines()
            .find_map(|l| {
                l.strip_prefix("SCENE ")
                    .and_then(|r| r.strip_suffix(" INFORMATION:"))
                    .and_then(|n| n.parse().ok())
            })
            .unwrap_or(1);
        let improved = image_text.contains("v2/");
        let position_bump = if image_text.contains("t=0.5") { 0 } else { 1 };
        let base = if improved { 4i64 } else { 3 };
        let layout = (base + i64::from(scene_index % 2)).min(5);
        let readability = (base + position_bump).min(5);
        let issues: Vec<String> = if improved || scene_index != 1 {
            vec![]
        } else {
            vec!["high overlap detected".to_string()]
        };
        let suggestions: Vec<String> = if improved {
            vec![]
        } else {
            vec!["Use arrange(DOWN, buff=0.5) to separate the equation stack".to_string()]
        };
        serde_json::json!({
            "evaluable": true,
            "layout_quality": layout,
            "layout_quality_evidence": "Spacing measured against the rubric.",
            "text_readability": readability,
            "text_readability_evidence": "Font sizes legible at 480p.",
            "equation_rendering": base,
            "equation_rendering_evidence": "MathTex rendered without artifacts.",
            "off_screen_issues": 5,
            "off_screen_issues_evidence": "All elements fully inside the frame.",
            "scene_content_alignment": (base + 1).min(5),
            "scene_content_alignment_evidence": "Visuals match the scene description.",
            "issues": issues,
            "suggestions": suggestions,
            "confidence": 4,
            "feedback": "Scored against the strict rubric."
        })
        .to_string()
    }
}

impl Transport for ScriptedModel {
    fn send(&self, request: &ModelRequest) -> Result<TransportReply, String> {
        let prompt = request
            .messages
            .first()
            .map(|m| m.text.as_str())
            .unwrap_or_default();
        let head: String = prompt.lines().take(4).collect::<Vec<_>>().join("\n");
        let text = if head.contains("Agent: PhysicsSolutionAgent") {
            let n = self.bump("solution");
            if self.solution_malformed_first
                && n == 1
                && !prompt.contains("IMPORTANT: Your previous reply")
            {
                // Truncated reply: END delimiter missing.
                "SOLUTION BEGIN:\n[Step 1]\nApproach/Concept: cut off".to_string()
            } else {
                self.solution_text()
            }
        } else if head.contains("Agent: PlannerAgent") {
            self.bump("scene_plan");
            self.plan_text()
        } else if head.contains("Purpose: Generate executable Manim code") {
            self.bump("codegen");
            self.code_text()
        } else if head.contains("Purpose: Debug and fix Manim code") {
            let n = self.bump("error_fix");
            Self::echo_code_block(prompt, &format!("repaired ({n})"))
        } else if head.contains("Purpose: Improve Manim code") {
            self.bump("visual_improve");
            Self::echo_code_block(prompt, "visually improved: wider buffers")
        } else if head.contains("Agent: SolutionEvaluator") {
            let n = self.bump("judge_solution");
            if self.judge_malformed_first
                && n == 1
                && !prompt.contains("IMPORTANT: Your previous reply")
            {
                "The solution looks excellent overall!".to_string()
            } else {
                self.judge_solution_json()
            }
        } else if head.contains("Agent: ExplanationEvaluator") {
            self.bump("judge_explanation");
            self.judge_explanation_json()
        } else if head.contains("Agent: ScreenshotAnalyzer") {
            self.bump("screenshot_analysis");
            let image_text = request
                .images
                .first()
                .map(|i| String::from_utf8_lossy(&i.data).to_string())
                .unwrap_or_default();
            self.visual_json(prompt, &image_text)
        } else {
            return Err(format!("scripted model cannot answer prompt: {head}"));
        };
        Ok(TransportReply {
            text,
            prompt_tokens: 100,
            completion_tokens: 200,
        })
    }
}

/// A transport wrapper that counts sends, for the zero-network assertions.
/// The counter handle stays valid after the transport is boxed into a
/// gateway.
pub struct CountingTransport<T: Transport> {
    pub inner: T,
    count: std::sync::Arc<std::sync::atomic::AtomicU64>,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        CountingTransport {
            inner,
            count: std::sync::Arc::new(std::sync::atomic::AtomicU64::new(0)),
        }
    }

    pub fn counter(&self) -> std::sync::Arc<std::sync::atomic::AtomicU64> {
        self.count.clone()
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn send(&self, request: &ModelRequest) -> Result<TransportReply, String> {
        self.count.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.send(request)
    }
}

#[cfg(unix)]
fn make_executable(path: &Path) {
    use std::os::unix::fs::PermissionsExt;
    let mut perms = fs::metadata(path).unwrap().permissions();
    perms.set_mode(0o755);
    fs::set_permissions(path, perms).unwrap();
}

/// Writes the fake tool scripts into `dir` and returns a `ToolConfig`
/// pointing at them.
///
/// The fake renderer consults `<dir>/fail_plan_<scene>` for how many times
/// that scene class should fail before succeeding; invocation counts are
/// kept per media directory so every run (and every version) starts fresh.
pub fn install_fake_tools(dir: &Path) -> ToolConfig {
    fs::create_dir_all(dir).unwrap();

    // Parameter expansion instead of command substitution keeps these
    // scripts to a single fork each; the suites spawn them thousands of
    // times.
    let render = dir.join("fake_render.sh");
    fs::write(
        &render,
        r#"#!/bin/sh
script="$1"; scene="$2"; media="$3"
plan="${0%/*}/fail_plan_$scene"
mkdir -p "$media"
cnt="$media/.count_$scene"
k=0; [ -f "$plan" ] && read -r k < "$plan"
n=0; [ -f "$cnt" ] && read -r n < "$cnt"
n=$((n+1)); printf '%s' "$n" > "$cnt"
if [ "$n" -le "$k" ]; then
  echo "Traceback (most recent call last):" >&2
  echo "LaTeX Error: Undefined control sequence (failure $n of $scene)" >&2
  exit 1
fi
mediadir="${media%/}"
ver="${mediadir%/*}"; ver="${ver##*/}"
printf 'FAKEVIDEO scene=%s src=%s ver=%s duration=4\n' "$scene" "${script##*/}" "$ver" > "$media/$scene.mp4"
exit 0
"#,
    )
    .unwrap();
    make_executable(&render);

    let probe = dir.join("fake_probe.sh");
    fs::write(
        &probe,
        r#"#!/bin/sh
v="$1"
[ -f "$v" ] || { echo "no such file: $v" >&2; exit 1; }
IFS= read -r line < "$v" || exit 1
d=${line##*duration=}
d=${d%%[!0-9]*}
[ -n "$d" ] || { echo "no duration in $v" >&2; exit 1; }
echo "$d"
"#,
    )
    .unwrap();
    make_executable(&probe);

    let extract = dir.join("fake_extract.sh");
    fs::write(
        &extract,
        r#"#!/bin/sh
v="$1"; t="$2"; out="$3"
[ -f "$v" ] || { echo "no such video: $v" >&2; exit 1; }
p1="${v%/*}"; p2="${p1%/*}"
printf 'FRAME t=%s video=%s/%s/%s\n' "$t" "${p2##*/}" "${p1##*/}" "${v##*/}" > "$out"
exit 0
"#,
    )
    .unwrap();
    make_executable(&extract);

    let concat = dir.join("fake_concat.sh");
    fs::write(
        &concat,
        // Clip entries are relative to the list file, matching the concat
        // demuxer's resolution rule.
        r#"#!/bin/sh
list="$1"; out="$2"
case "$list" in /*) ;; *) list="$PWD/$list" ;; esac
case "$out" in /*) ;; *) out="$PWD/$out" ;; esac
cd "${list%/*}" || exit 1
total=0
tmp="$out.parts"
: > "$tmp"
while IFS= read -r line; do
  f=${line#file \'}; f=${f%\'}
  [ -f "$f" ] || { echo "missing clip: $f" >&2; rm -f "$tmp"; exit 1; }
  IFS= read -r head < "$f"
  d=${head##*duration=}
  d=${d%%[!0-9]*}
  total=$((total+d))
  cat "$f" >> "$tmp"
done < "$list"
printf 'FAKEVIDEO concat duration=%s\n' "$total" > "$out"
cat "$tmp" >> "$out"
rm -f "$tmp"
exit 0
"#,
    )
    .unwrap();
    make_executable(&concat);

    let slow = dir.join("slow_render.sh");
    fs::write(&slow, "#!/bin/sh\nsleep 3600\n").unwrap();
    make_executable(&slow);

    ToolConfig {
        render: vec![
            render.display().to_string(),
            "{script}".into(),
            "{scene}".into(),
            "{media_dir}".into(),
        ],
        probe: vec![probe.display().to_string(), "{video}".into()],
        extract: vec![
            extract.display().to_string(),
            "{video}".into(),
            "{time}".into(),
            "{out}".into(),
        ],
        concat: vec![
            concat.display().to_string(),
            "{list}".into(),
            "{out}".into(),
        ],
    }
}

/// Argv for the sleep-forever renderer, for timeout tests.
pub fn slow_render_tools(dir: &Path) -> ToolConfig {
    let mut tools = install_fake_tools(dir);
    tools.render = vec![
        dir.join("slow_render.sh").display().to_string(),
        "{script}".into(),
        "{scene}".into(),
        "{media_dir}".into(),
    ];
    tools
}

/// Declares that `scene_class` should fail `k` times before rendering.
pub fn set_fail_plan(tools_dir: &Path, scene_class: &str, k: u32) {
    fs::write(
        tools_dir.join(format!("fail_plan_{scene_class}")),
        k.to_string(),
    )
    .unwrap();
}

/// A pipeline config wired to the fake tools, with run artifacts and CSV
/// under `out_dir`.
pub fn fixture_config(tools_dir: &Path, out_dir: &Path) -> PipelineConfig {
    let mut config = PipelineConfig {
        tools: install_fake_tools(tools_dir),
        ..PipelineConfig::default()
    };
    config.render.timeout_s = 30;
    config.render.pool_size = 2;
    config.gateway.retry.base_delay_ms = 1;
    config.gateway.retry.max_delay_ms = 2;
    config.paths.out_dir = out_dir.to_path_buf();
    config.paths.csv = out_dir.join("results.csv");
    config
}

/// The four-question fixture batch: one question per category.
pub fn fixture_questions() -> Vec<(psa_core::domain::Category, &'static str)> {
    use psa_core::domain::Category;
    vec![
        (
            Category::Easy,
            "A ball is dropped from a height of 20 m. How long does it take to reach the ground? Take g = 10 m/s^2.",
        ),
        (
            Category::Medium,
            "A block slides down a frictionless incline of angle 30 degrees and length 9 m. Find its speed at the bottom.",
        ),
        (
            Category::Hard,
            "A uniform rod of length L pivots about one end. Find the angular velocity after falling from horizontal, and the reaction at the pivot at that instant.",
        ),
        (
            Category::Theorem,
            "Explain Archimedes' Principle and derive the buoyant force on a fully submerged body.",
        ),
    ]
}

/// Seeds a small renderer-documentation corpus for RAG tests.
pub fn fixture_docs() -> Vec<(String, String)> {
    vec![
        (
            "mobjects.md".to_string(),
            "Text and MathTex render text and equations. Use MathTex for formulas. VGroup groups related objects and arrange(DOWN, buff=0.5) spaces them.".to_string(),
        ),
        (
            "animation.md".to_string(),
            "Write, Create, FadeIn and FadeOut are the basic animations. Transform morphs one mobject into another.".to_string(),
        ),
        (
            "motion.md".to_string(),
            "MoveAlongPath animates an object along a path. Rotate spins a mobject about a point.".to_string(),
        ),
        (
            "positioning.md".to_string(),
            "next_to places one mobject beside another with a buffer. to_edge pins a mobject to a screen edge. shift moves by a vector.".to_string(),
        ),
        (
            "voiceover.md".to_string(),
            "VoiceoverScene synchronizes narration with animation. Call set_speech_service first in construct, then use the voiceover context manager.".to_string(),
        ),
    ]
}
