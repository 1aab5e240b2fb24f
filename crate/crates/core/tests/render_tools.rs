//! Renderer-io behavior against the fake external tools.

use psa_core::domain::{Provenance, RenderStatus, SceneScript};
use psa_core::render::{assemble, capture_screenshots, probe_duration, render_scene};
use psa_testkit::{install_fake_tools, set_fail_plan, slow_render_tools};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

fn script(scene_index: u32) -> SceneScript {
    SceneScript {
        scene_index,
        source: "class S(Scene):\n    pass\n".to_string(),
        attempt: 1,
        provenance: Provenance::Generated,
    }
}

#[test]
fn fake_renderer_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let tools = install_fake_tools(&dir.path().join("tools"));
    let media = dir.path().join("media");
    let script_path = dir.path().join("scene_1.py");
    fs::write(&script_path, "code").unwrap();
    let result = render_scene(&tools, &script(1), "SceneA", &script_path, &media, 10).unwrap();
    assert_eq!(result.status, RenderStatus::Success);
    assert_eq!(result.duration_s, 4.0);
    let video = PathBuf::from(result.video_path.unwrap());
    assert!(video.exists());
    let content = fs::read_to_string(video).unwrap();
    assert!(content.contains("scene=SceneA"));
    assert!(content.contains("src=scene_1.py"));
}

#[test]
fn fake_renderer_failure_preserves_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let tools = install_fake_tools(&tools_dir);
    set_fail_plan(&tools_dir, "SceneB", 1);
    let media = dir.path().join("media");
    let script_path = dir.path().join("scene_1.py");
    fs::write(&script_path, "code").unwrap();
    let result = render_scene(&tools, &script(1), "SceneB", &script_path, &media, 10).unwrap();
    assert_eq!(result.status, RenderStatus::Failed);
    assert!(result
        .stderr
        .contains("LaTeX Error: Undefined control sequence"));
    assert!(result.stderr.contains("Traceback"));
    assert!(result.video_path.is_none());

    // Second invocation succeeds (the plan said fail once).
    let result = render_scene(&tools, &script(1), "SceneB", &script_path, &media, 10).unwrap();
    assert_eq!(result.status, RenderStatus::Success);
}

#[test]
fn render_timeout_is_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let tools = slow_render_tools(&dir.path().join("tools"));
    let media = dir.path().join("media");
    let script_path = dir.path().join("scene_1.py");
    fs::write(&script_path, "code").unwrap();
    let started = Instant::now();
    let result = render_scene(&tools, &script(1), "SceneC", &script_path, &media, 2).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(result.status, RenderStatus::Failed);
    assert_eq!(result.stderr, "render timeout");
    assert!((2.0..4.0).contains(&elapsed), "timeout took {elapsed}s");
}

#[test]
fn screenshots_record_requested_times() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let tools = install_fake_tools(&tools_dir);
    let media = dir.path().join("media");
    let script_path = dir.path().join("scene_1.py");
    fs::write(&script_path, "code").unwrap();
    let rendered = render_scene(&tools, &script(3), "SceneD", &script_path, &media, 10).unwrap();
    let video = PathBuf::from(rendered.video_path.unwrap());

    let out_dir = dir.path().join("shots");
    let shots = capture_screenshots(&tools, &video, 10.0, 3, &out_dir).unwrap();
    assert_eq!(shots.len(), 3);
    let times: Vec<f64> = shots.iter().map(|s| s.timestamp_s).collect();
    assert_eq!(times, vec![0.5, 5.0, 9.5]);
    for (shot, expect) in shots.iter().zip(["t=0.500", "t=5.000", "t=9.500"]) {
        let content = fs::read_to_string(&shot.image_path).unwrap();
        assert!(content.contains(expect), "{content}");
        assert!(content.contains("media/SceneD.mp4"));
    }
}

#[test]
fn assemble_sums_durations_and_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let tools_dir = dir.path().join("tools");
    let tools = install_fake_tools(&tools_dir);
    let media = dir.path().join("media");
    let script_path = dir.path().join("scene.py");
    fs::write(&script_path, "code").unwrap();

    let mut clips = Vec::new();
    for class in ["First", "Second", "Third"] {
        let r = render_scene(&tools, &script(1), class, &script_path, &media, 10).unwrap();
        clips.push(PathBuf::from(r.video_path.unwrap()));
    }
    let out = media.join("final.mp4");
    assemble(&tools, &clips, &out).unwrap();
    let total = probe_duration(&tools, &out).unwrap();
    assert!((total - 12.0).abs() <= 0.2, "total {total}");

    // Watermark order: the per-clip headers appear in scene order.
    let content = fs::read_to_string(&out).unwrap();
    let first = content.find("scene=First").unwrap();
    let second = content.find("scene=Second").unwrap();
    let third = content.find("scene=Third").unwrap();
    assert!(first < second && second < third);

    // The list references clips relative to its own directory.
    let list = fs::read_to_string(out.with_extension("concat.txt")).unwrap();
    assert_eq!(
        list,
        "file 'First.mp4'\nfile 'Second.mp4'\nfile 'Third.mp4'\n"
    );
}

#[test]
fn assemble_single_clip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let tools = install_fake_tools(&dir.path().join("tools"));
    let media = dir.path().join("media");
    let script_path = dir.path().join("scene.py");
    fs::write(&script_path, "code").unwrap();
    let r = render_scene(&tools, &script(1), "Only", &script_path, &media, 10).unwrap();
    let clip = PathBuf::from(r.video_path.unwrap());
    let out = media.join("final.mp4");
    assemble(&tools, std::slice::from_ref(&clip), &out).unwrap();
    let in_d = probe_duration(&tools, &clip).unwrap();
    let out_d = probe_duration(&tools, &out).unwrap();
    assert!((in_d - out_d).abs() <= 0.2);
}
