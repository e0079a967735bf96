use std::path::Path;
use std::process::{Command, Output};

use nrmosaic::raster::{load_color, load_rgba, save_color};
use nrmosaic::synth::{FrameNodes, SceneConfig, SyntheticScene};
use nrmosaic::Vec2;

fn nrmosaic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrmosaic")).args(args).env_remove("NRMOSAIC_WORKERS").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--set", "width=160", "--set", "height=96", "--set", "path_extent=[40.0, 8.0]", "--set", "max_displacement=5.0"];

fn synth(dir: &Path, seed: &str, frames: &str) {
    let mut args = vec!["synth", "-o", p(dir), "--seed", seed, "--frames", frames];
    args.extend(SMALL);
    ok(&nrmosaic(&args));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "7", "3");
    synth(&b, "7", "3");
    for name in ["frame_00000.png", "frame_00002.png", "map_00001.nrmc", "scene.toml"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = tmp.path().join("c");
    synth(&c, "8", "1");
    assert_ne!(std::fs::read(a.join("frame_00000.png")).unwrap(), std::fs::read(c.join("frame_00000.png")).unwrap());
}

#[test]
fn mosaic_and_eval_on_a_synthetic_scan() {
    let tmp = tempfile::tempdir().unwrap();
    let (scan, run) = (tmp.path().join("scan"), tmp.path().join("run"));
    synth(&scan, "3", "12");
    ok(&nrmosaic(&["mosaic", p(&scan), "-o", p(&run), "--overlay", "--set", "workers=2"]));

    let stats = std::fs::read_to_string(run.join("stats.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = stats.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0]["status"], "initialized");
    for (t, l) in lines.iter().enumerate() {
        assert_eq!(l["frame"], t);
        assert!(l["timings"]["track"].is_number());
        assert_ne!(l["status"], "lost");
    }
    assert!(run.join("overlay/frame_00011.png").exists());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("mosaic_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["frames_processed"], 12);
    let (img, mask) = load_rgba(&run.join("mosaic.png")).unwrap();
    assert_eq!((img.width as u64, img.height as u64), (meta["width"].as_u64().unwrap(), meta["height"].as_u64().unwrap()));
    assert!(mask.iter().filter(|&&m| m).count() > 160 * 96);

    let out = nrmosaic(&["eval", p(&run), "--scene", p(&scan)]);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["node_rmse"].as_f64().unwrap() < 1.0, "{report}");
    assert!(report["mosaic_rmse"].as_f64().unwrap() < 10.0 / 255.0, "{report}");
}

#[test]
fn identical_frames_reproduce_the_first() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, run) = (tmp.path().join("frames"), tmp.path().join("run"));
    std::fs::create_dir_all(&frames).unwrap();
    let cfg = SceneConfig { width: 160, height: 96, frames: 1, ..Default::default() };
    let first = SyntheticScene::new(cfg).unwrap().render(0).0;
    for t in 0..4 {
        save_color(&frames.join(format!("img{t}.png")), &first).unwrap();
    }
    ok(&nrmosaic(&["mosaic", p(&frames), "-o", p(&run)]));
    let written = load_color(&frames.join("img0.png")).unwrap();
    let (img, mask) = load_rgba(&run.join("mosaic.png")).unwrap();
    assert_eq!((img.width, img.height), (160, 96));
    assert!(mask.iter().all(|&m| m));
    let worst = img.data.iter().zip(&written.data).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0, f32::max);
    assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
}

#[test]
fn missing_input_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nrmosaic(&["mosaic", "/no/such/dir", "-o", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a directory"));
}

#[test]
fn empty_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nrmosaic(&["mosaic", p(tmp.path()), "-o", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn unreadable_frames_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let scan = tmp.path().join("scan");
    synth(&scan, "1", "4");
    std::fs::write(scan.join("frame_00002.png"), b"not a png").unwrap();
    let run = tmp.path().join("run");
    ok(&nrmosaic(&["mosaic", p(&scan), "-o", p(&run)]));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("mosaic_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["frames_skipped"], 1);
    assert_eq!(meta["frames_processed"], 3);
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "alpha = 1e-4\nloop_stride = \"five\"\n").unwrap();
    let out = nrmosaic(&["mosaic", p(tmp.path()), "-c", p(&cfg), "-o", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loop_stride"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = nrmosaic(&["mosaic", p(tmp.path()), "--set", "estimator.field_alpha=-1", "-o", p(&tmp.path().join("o"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimator.field_alpha"));

    let out = nrmosaic(&["synth", "-o", p(&tmp.path().join("s")), "--set", "nonsense=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn worker_env_caps_the_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let scan = tmp.path().join("scan");
    synth(&scan, "2", "2");
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_nrmosaic"))
        .args(["mosaic", p(&scan), "-o", p(&run), "--set", "workers=4"])
        .env("NRMOSAIC_WORKERS", "1")
        .output()
        .unwrap();
    ok(&out);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("mosaic_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["workers"], 1);
}

#[test]
fn eval_scores_perfect_and_shifted_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_path = tmp.path().join("scene.toml");
    let cfg = SceneConfig { width: 160, height: 96, frames: 3, max_displacement: 5.0, path_extent: [30.0, 5.0], ..Default::default() };
    std::fs::write(&scene_path, cfg.to_toml_string()).unwrap();
    let scene = SyntheticScene::new(cfg).unwrap();
    let anchors: Vec<Vec2> = (0..6).map(|i| Vec2::new(30.0 + 18.0 * i as f64, 40.0)).collect();
    let write_run = |dir: &Path, offset: Vec2| {
        std::fs::create_dir_all(dir).unwrap();
        let lines: Vec<String> = (0..3)
            .map(|t| {
                let f = FrameNodes {
                    frame: t,
                    anchors: anchors.clone(),
                    positions: anchors.iter().map(|a| scene.true_position(*a, t) + offset).collect(),
                };
                serde_json::to_string(&f).unwrap()
            })
            .collect();
        std::fs::write(dir.join("nodes.jsonl"), lines.join("\n")).unwrap();
    };
    let (perfect, shifted) = (tmp.path().join("perfect"), tmp.path().join("shifted"));
    write_run(&perfect, Vec2::zeros());
    write_run(&shifted, Vec2::new(3.0, 4.0));
    let score = |dir: &Path| {
        let out = nrmosaic(&["eval", p(dir), "--scene", p(&scene_path), "--no-mosaic"]);
        ok(&out);
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let r = score(&perfect);
    assert!(r["node_rmse"].as_f64().unwrap() < 1e-9 && r["drift"].as_f64().unwrap() < 1e-9, "{r}");
    let r = score(&shifted);
    assert!((r["node_rmse"].as_f64().unwrap() - 5.0).abs() < 1e-9, "{r}");
}

#[test]
fn match_dump_writes_parseable_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let scan = tmp.path().join("scan");
    synth(&scan, "4", "2");
    let out = nrmosaic(&["match-dump", p(&scan.join("frame_00000.png")), p(&scan.join("frame_00001.png"))]);
    ok(&out);
    let m = nrmosaic::features::parse_matches(&String::from_utf8(out.stdout).unwrap(), "stdout").unwrap();
    assert!(m.len() > 20, "{}", m.len());
}
