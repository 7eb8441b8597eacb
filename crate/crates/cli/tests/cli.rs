use std::path::Path;
use std::process::{Command, Output};

fn nocspose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nocspose")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, frames: usize) -> std::path::PathBuf {
    let p = dir.join("config.json");
    let cfg = serde_json::json!({ "seed": 5, "synth": { "frames": frames } });
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 4);
    let scene = dir.path().join("scene");
    let out = nocspose(&["synth", "--config", s(&cfg), "--out", s(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = scene.join("manifest.json");

    let est = dir.path().join("est");
    let out = nocspose(&[
        "estimate", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&est), "--mode", "rgb+d-kabsch",
        "--bbox", "jitter",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = nocspose(&["eval", "--manifest", s(&manifest), "--out", s(&est)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(est.join("summary.csv").exists());

    let refined = dir.path().join("refined");
    let out = nocspose(&[
        "refine", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&refined), "--views", "2",
        "--sampling", "furthest",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(refined.join("refine_reports.json").exists());

    let renders = dir.path().join("renders");
    let out = nocspose(&["render", "--manifest", s(&manifest), "--frame", "000002", "--out", s(&renders)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(renders.join("000002_nocs.png")).unwrap(),
        std::fs::read(scene.join("frames/000002_nocs.png")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    nocspose(&["synth", "--config", s(&cfg), "--out", s(&a), "--seed", "9"]);
    nocspose(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    assert_ne!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"views": 0}"#).unwrap();
    assert_eq!(nocspose(&["synth", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(nocspose(&["synth", "--mode", "lidar"]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(nocspose(&["synth", "--config", s(&missing)]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, "{ not json").unwrap();
    let out = nocspose(&["estimate", "--manifest", s(&manifest), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn all_failed_frames_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    // Every correspondence dropped: no frame can be solved.
    let json = serde_json::json!({ "seed": 1, "noise": { "dropout_frac": 1.0 }, "synth": { "frames": 2 } });
    std::fs::write(&cfg, json.to_string()).unwrap();
    let scene = dir.path().join("scene");
    assert!(nocspose(&["synth", "--config", s(&cfg), "--out", s(&scene)]).status.success());
    let out = nocspose(&[
        "estimate", "--config", s(&cfg), "--manifest", s(&scene.join("manifest.json")), "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("records.json").exists());
}
