//! Executes renderer scripts as external processes, captures failures,
//! extracts screenshots, and assembles the final video.
//!
//! Every external tool is an injected argv template, so the whole module
//! runs against fakes in tests; the defaults target the Manim Community
//! Edition CLI and ffmpeg/ffprobe.

use crate::domain::{
    RenderResult, RenderStatus, SceneScript, Screenshot, ScreenshotPosition, Version,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use thiserror::Error;
use wait_timeout::ChildExt;

#[derive(Debug, Error)]
pub enum RenderIoError {
    #[error("renderer executable not found: {0}")]
    RendererMissing(String),
    #[error("frame extraction failed: {0}")]
    ExtractionFailed(String),
    #[error("video concatenation failed: {0}")]
    ConcatFailed(String),
    #[error("duration probe failed: {0}")]
    ProbeFailed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Argv templates for the external tools. Placeholders: `{script}`,
/// `{scene}`, `{media_dir}` (render); `{video}` (probe); `{video}`,
/// `{time}`, `{out}` (extract); `{list}`, `{out}` (concat).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub render: Vec<String>,
    pub probe: Vec<String>,
    pub extract: Vec<String>,
    pub concat: Vec<String>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            render: vec![
                "manim".into(),
                "render".into(),
                "-qm".into(),
                "--disable_caching".into(),
                "--media_dir".into(),
                "{media_dir}".into(),
                "{script}".into(),
                "{scene}".into(),
            ],
            probe: vec![
                "ffprobe".into(),
                "-v".into(),
                "error".into(),
                "-show_entries".into(),
                "format=duration".into(),
                "-of".into(),
                "default=noprint_wrappers=1:nokey=1".into(),
                "{video}".into(),
            ],
            extract: vec![
                "ffmpeg".into(),
                "-y".into(),
                "-ss".into(),
                "{time}".into(),
                "-i".into(),
                "{video}".into(),
                "-frames:v".into(),
                "1".into(),
                "{out}".into(),
            ],
            concat: vec![
                "ffmpeg".into(),
                "-y".into(),
                "-f".into(),
                "concat".into(),
                "-safe".into(),
                "0".into(),
                "-i".into(),
                "{list}".into(),
                "-c".into(),
                "copy".into(),
                "{out}".into(),
            ],
        }
    }
}

fn substitute(argv: &[String], pairs: &[(&str, &str)]) -> Vec<String> {
    argv.iter()
        .map(|arg| {
            let mut s = arg.clone();
            for (k, v) in pairs {
                s = s.replace(&format!("{{{k}}}"), v);
            }
            s
        })
        .collect()
}

struct ToolOutput {
    status_ok: bool,
    stdout: String,
    stderr: String,
}

fn run_tool(argv: &[String]) -> Result<ToolOutput, std::io::Error> {
    let out = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .output()?;
    Ok(ToolOutput {
        status_ok: out.status.success(),
        stdout: String::from_utf8_lossy(&out.stdout).to_string(),
        stderr: String::from_utf8_lossy(&out.stderr).to_string(),
    })
}

/// Run directory layout for one question:
/// `<root>/runs/<question_id>/<version>/{code,media,screenshots,logs}`.
///
/// The generated code requires the project root to sit exactly four path
/// levels above the code directory; this layout satisfies that.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
    pub question_id: String,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>, question_id: impl Into<String>) -> Self {
        RunPaths {
            root: root.into(),
            question_id: question_id.into(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join("runs").join(&self.question_id)
    }

    pub fn version_dir(&self, version: Version) -> PathBuf {
        self.run_dir().join(version.as_str())
    }

    pub fn code_dir(&self, version: Version) -> PathBuf {
        self.version_dir(version).join("code")
    }

    pub fn media_dir(&self, version: Version) -> PathBuf {
        self.version_dir(version).join("media")
    }

    pub fn screenshots_dir(&self, version: Version) -> PathBuf {
        self.version_dir(version).join("screenshots")
    }

    pub fn logs_dir(&self, version: Version) -> PathBuf {
        self.version_dir(version).join("logs")
    }

    pub fn ensure(&self, version: Version) -> std::io::Result<()> {
        for dir in [
            self.code_dir(version),
            self.media_dir(version),
            self.screenshots_dir(version),
            self.logs_dir(version),
        ] {
            fs::create_dir_all(dir)?;
        }
        Ok(())
    }
}

const SPEECH_SERVICE_CALL: &str = "set_speech_service(";
const FORBIDDEN_TOKEN: &str = "ImageMobject";

/// Checks a script for contract violations without executing it. Each
/// violation is phrased as an error message ready for the error-fix
/// prompt's `{error_message}` slot.
pub fn static_check(script: &SceneScript) -> Vec<String> {
    let mut violations = Vec::new();
    let source = &script.source;
    if source.contains(FORBIDDEN_TOKEN) {
        violations.push(format!(
            "StaticCheckViolation: forbidden construct '{FORBIDDEN_TOKEN}' used; only built-in geometric shapes, Text and MathTex are allowed"
        ));
    }
    let classes = scene_classes(source);
    if classes.is_empty() {
        violations.push(
            "StaticCheckViolation: no scene class definitions found in the script".to_string(),
        );
        return violations;
    }
    for (name, body) in &classes {
        if !body.contains(SPEECH_SERVICE_CALL) {
            violations.push(format!(
                "StaticCheckViolation: scene class '{name}' never calls self.{SPEECH_SERVICE_CALL}...) as the first line of construct()"
            ));
        }
    }
    violations
}

/// Scene class declarations in source order, with their body text. A scene
/// class is any class whose base list mentions `Scene`.
pub fn scene_classes(source: &str) -> Vec<(String, String)> {
    static CLASS_RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = CLASS_RE
        .get_or_init(|| regex::Regex::new(r"(?m)^class\s+(\w+)\s*\(([^)]*)\)\s*:").unwrap());
    let mut found: Vec<(usize, String)> = Vec::new();
    for c in re.captures_iter(source) {
        let bases = c.get(2).map(|m| m.as_str()).unwrap_or("");
        if bases.contains("Scene") {
            found.push((c.get(0).unwrap().start(), c[1].to_string()));
        }
    }
    let mut out = Vec::new();
    for (i, (start, name)) in found.iter().enumerate() {
        let end = if i + 1 < found.len() {
            found[i + 1].0
        } else {
            source.len()
        };
        out.push((name.clone(), source[*start..end].to_string()));
    }
    out
}

/// Runs the external renderer for one scene class. A nonzero exit becomes
/// `status=failed` with stderr captured verbatim; exceeding `timeout_s`
/// kills the process and fails with the synthetic stderr `render timeout`.
pub fn render_scene(
    tools: &ToolConfig,
    script: &SceneScript,
    scene_class: &str,
    script_path: &Path,
    media_dir: &Path,
    timeout_s: u64,
) -> Result<RenderResult, RenderIoError> {
    let argv = substitute(
        &tools.render,
        &[
            ("script", &script_path.display().to_string()),
            ("scene", scene_class),
            ("media_dir", &media_dir.display().to_string()),
        ],
    );
    fs::create_dir_all(media_dir)?;
    let started = Instant::now();
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                RenderIoError::RendererMissing(argv[0].clone())
            } else {
                RenderIoError::Io(e)
            }
        })?;

    let failed = |stderr: String, wall: f64| RenderResult {
        scene_index: script.scene_index,
        status: RenderStatus::Failed,
        stderr,
        video_path: None,
        duration_s: 0.0,
        attempts_used: script.attempt,
        wall_time_s: wall,
    };

    let status = match child.wait_timeout(Duration::from_secs(timeout_s))? {
        Some(status) => status,
        None => {
            child.kill().ok();
            child.wait().ok();
            return Ok(failed(
                "render timeout".to_string(),
                started.elapsed().as_secs_f64(),
            ));
        }
    };
    let mut stderr = String::new();
    if let Some(mut pipe) = child.stderr.take() {
        use std::io::Read;
        pipe.read_to_string(&mut stderr).ok();
    }
    let wall = started.elapsed().as_secs_f64();
    if !status.success() {
        return Ok(failed(stderr, wall));
    }

    let Some(video) = discover_video(media_dir, scene_class) else {
        return Ok(failed(
            format!("renderer exited 0 but produced no video for scene class '{scene_class}'"),
            wall,
        ));
    };
    let duration_s = probe_duration(tools, &video)?;
    if duration_s <= 0.0 {
        return Ok(failed(
            format!("probed non-positive duration for {}", video.display()),
            wall,
        ));
    }
    Ok(RenderResult {
        scene_index: script.scene_index,
        status: RenderStatus::Success,
        stderr,
        video_path: Some(video.display().to_string()),
        duration_s,
        attempts_used: script.attempt,
        wall_time_s: wall,
    })
}

const VIDEO_EXTENSIONS: [&str; 4] = ["mp4", "mov", "mkv", "webm"];

/// Newest file under `media_dir` whose stem matches the scene class.
fn discover_video(media_dir: &Path, scene_class: &str) -> Option<PathBuf> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    let mut stack = vec![media_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let stem_matches = path
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s == scene_class);
            let ext_matches = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| VIDEO_EXTENSIONS.contains(&e));
            if stem_matches && ext_matches {
                let mtime = entry
                    .metadata()
                    .and_then(|m| m.modified())
                    .unwrap_or(std::time::UNIX_EPOCH);
                if best.as_ref().is_none_or(|(t, _)| mtime >= *t) {
                    best = Some((mtime, path));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Probes a clip's duration in seconds via the configured probe tool.
pub fn probe_duration(tools: &ToolConfig, video: &Path) -> Result<f64, RenderIoError> {
    let argv = substitute(&tools.probe, &[("video", &video.display().to_string())]);
    let out = run_tool(&argv)?;
    if !out.status_ok {
        return Err(RenderIoError::ProbeFailed(out.stderr));
    }
    out.stdout
        .lines()
        .find_map(|l| l.trim().parse::<f64>().ok())
        .ok_or_else(|| RenderIoError::ProbeFailed(format!("no duration in output: {}", out.stdout)))
}

/// Screenshot timestamps for a scene of the given duration: start offset
/// avoids title fade-ins, end offset avoids black end frames, and short
/// scenes fall back to quarter points.
pub fn screenshot_timestamps(duration_s: f64) -> [(ScreenshotPosition, f64); 3] {
    [
        (ScreenshotPosition::Start, (0.5f64).min(duration_s / 4.0)),
        (ScreenshotPosition::Middle, duration_s / 2.0),
        (
            ScreenshotPosition::End,
            (duration_s - 0.5).max(0.75 * duration_s),
        ),
    ]
}

/// Extracts the start/middle/end frames of a rendered scene.
pub fn capture_screenshots(
    tools: &ToolConfig,
    video: &Path,
    duration_s: f64,
    scene_index: u32,
    out_dir: &Path,
) -> Result<Vec<Screenshot>, RenderIoError> {
    if !video.exists() {
        return Err(RenderIoError::ExtractionFailed(format!(
            "video not found: {}",
            video.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut shots = Vec::with_capacity(3);
    for (position, t) in screenshot_timestamps(duration_s) {
        let out = out_dir.join(format!("scene_{scene_index}_{}.png", position.label()));
        let argv = substitute(
            &tools.extract,
            &[
                ("video", &video.display().to_string()),
                ("time", &format!("{t:.3}")),
                ("out", &out.display().to_string()),
            ],
        );
        let result = run_tool(&argv)?;
        if !result.status_ok || !out.exists() {
            return Err(RenderIoError::ExtractionFailed(format!(
                "frame at {t:.3}s of {}: {}",
                video.display(),
                result.stderr
            )));
        }
        shots.push(Screenshot {
            scene_index,
            position,
            timestamp_s: t,
            image_path: out.display().to_string(),
        });
    }
    Ok(shots)
}

/// Relative path from `base` to `target` using `..` segments, so concat
/// lists stay location-independent. Falls back to `target` when the two
/// share no common root.
fn relative_path(base: &Path, target: &Path) -> PathBuf {
    use std::path::Component;
    let base_parts: Vec<Component> = base.components().collect();
    let target_parts: Vec<Component> = target.components().collect();
    let mut shared = 0;
    while shared < base_parts.len()
        && shared < target_parts.len()
        && base_parts[shared] == target_parts[shared]
    {
        shared += 1;
    }
    if shared == 0 {
        return target.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in shared..base_parts.len() {
        out.push("..");
    }
    for part in &target_parts[shared..] {
        out.push(part);
    }
    out
}

/// Concatenates scene clips in order without re-encoding. The list file
/// references clips relative to its own directory.
pub fn assemble(
    tools: &ToolConfig,
    clips: &[PathBuf],
    out: &Path,
) -> Result<PathBuf, RenderIoError> {
    if clips.is_empty() {
        return Err(RenderIoError::ConcatFailed(
            "no clips to assemble".to_string(),
        ));
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let list_path = out.with_extension("concat.txt");
    let list_dir = list_path.parent().unwrap_or(Path::new("."));
    let mut list = String::new();
    for clip in clips {
        if !clip.exists() {
            return Err(RenderIoError::ConcatFailed(format!(
                "missing clip: {}",
                clip.display()
            )));
        }
        let entry = relative_path(list_dir, clip);
        list.push_str(&format!("file '{}'\n", entry.display()));
    }
    fs::write(&list_path, list)?;
    let argv = substitute(
        &tools.concat,
        &[
            ("list", &list_path.display().to_string()),
            ("out", &out.display().to_string()),
        ],
    );
    let result = run_tool(&argv)?;
    if !result.status_ok || !out.exists() {
        return Err(RenderIoError::ConcatFailed(result.stderr));
    }
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Provenance;

    fn script(source: &str) -> SceneScript {
        SceneScript {
            scene_index: 1,
            source: source.to_string(),
            attempt: 1,
            provenance: Provenance::Generated,
        }
    }

    const COMPLIANT: &str = r#"
from manim import *

class IntroScene(VoiceoverScene):
    def construct(self):
        self.set_speech_service(KokoroService(voice="af_bella", speed=1.0, lang="en-us"))
        title = Text("hello")

class SecondScene(VoiceoverScene):
    def construct(self):
        self.set_speech_service(KokoroService(voice="af_bella", speed=1.0, lang="en-us"))
        eq = MathTex("v = u + at")
"#;

    #[test]
    fn compliant_script_has_no_violations() {
        assert!(static_check(&script(COMPLIANT)).is_empty());
    }

    #[test]
    fn forbidden_image_mobject_is_flagged() {
        let source = COMPLIANT.replace("Text(\"hello\")", "ImageMobject(\"x.png\")");
        let violations = static_check(&script(&source));
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("ImageMobject"));
    }

    #[test]
    fn missing_scene_classes_is_flagged() {
        let violations = static_check(&script("print('hello')"));
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("no scene class"));
    }

    #[test]
    fn missing_speech_service_names_the_class() {
        let source = r#"
class GoodScene(VoiceoverScene):
    def construct(self):
        self.set_speech_service(KokoroService())

class BadScene(VoiceoverScene):
    def construct(self):
        pass
"#;
        let violations = static_check(&script(source));
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("BadScene"));
    }

    #[test]
    fn scene_classes_in_declaration_order() {
        let classes = scene_classes(COMPLIANT);
        let names: Vec<&str> = classes.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["IntroScene", "SecondScene"]);
    }

    #[test]
    fn non_scene_classes_are_ignored() {
        let source = "class Helper(object):\n    pass\n\nclass Real(VoiceoverScene):\n    def construct(self):\n        self.set_speech_service(K())\n";
        let classes = scene_classes(source);
        assert_eq!(classes.len(), 1);
        assert_eq!(classes[0].0, "Real");
    }

    #[test]
    fn timestamps_follow_the_formula() {
        let t10 = screenshot_timestamps(10.0);
        assert_eq!(t10.map(|(_, t)| t), [0.5, 5.0, 9.5]);
        let t1 = screenshot_timestamps(1.0);
        assert_eq!(t1.map(|(_, t)| t), [0.25, 0.5, 0.75]);
    }

    #[test]
    fn timestamps_strictly_increasing_within_bounds() {
        for d in [0.8, 1.0, 2.0, 4.0, 10.0, 120.0, 3600.0] {
            let ts = screenshot_timestamps(d).map(|(_, t)| t);
            assert!(ts[0] < ts[1] && ts[1] < ts[2], "not increasing for {d}");
            assert!(ts[0] >= 0.0 && ts[2] <= d, "out of bounds for {d}");
        }
    }

    #[test]
    fn run_paths_layout_is_four_levels_deep() {
        let paths = RunPaths::new("/work", "q123");
        let code = paths.code_dir(Version::V1);
        assert_eq!(code, PathBuf::from("/work/runs/q123/v1/code"));
        // Four ancestors up from code/ is the project root.
        let mut up = code.clone();
        for _ in 0..4 {
            up = up.parent().unwrap().to_path_buf();
        }
        assert_eq!(up, PathBuf::from("/work"));
    }

    #[test]
    fn renderer_missing_is_an_error() {
        let tools = ToolConfig {
            render: vec![
                "definitely-not-a-real-renderer-9f3a".into(),
                "{script}".into(),
                "{scene}".into(),
                "{media_dir}".into(),
            ],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = render_scene(
            &tools,
            &script("class S(Scene):\n    pass"),
            "S",
            &dir.path().join("code.py"),
            &dir.path().join("media"),
            5,
        )
        .unwrap_err();
        assert!(matches!(err, RenderIoError::RendererMissing(_)));
    }

    #[test]
    fn assemble_empty_list_fails() {
        let dir = tempfile::tempdir().unwrap();
        let err = assemble(&ToolConfig::default(), &[], &dir.path().join("out.mp4")).unwrap_err();
        assert!(matches!(err, RenderIoError::ConcatFailed(_)));
    }

    #[test]
    fn capture_missing_video_fails() {
        let dir = tempfile::tempdir().unwrap();
        let err = capture_screenshots(
            &ToolConfig::default(),
            &dir.path().join("absent.mp4"),
            10.0,
            1,
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, RenderIoError::ExtractionFailed(_)));
    }
}
