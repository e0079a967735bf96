use nrmosaic::features::save_matches;
use nrmosaic::pipeline::ManifestMatches;
use nrmosaic::synth::{evaluate, SceneConfig, SyntheticScene};
use nrmosaic::{Config, FrameReport, FrameStatus, MatchPair, Pipeline, Vec2};

fn scene(frames: usize) -> SyntheticScene {
    SyntheticScene::new(SceneConfig {
        width: 240,
        height: 135,
        frames,
        path_extent: [150.0, 30.0],
        max_displacement: 7.5,
        ..Default::default()
    })
    .unwrap()
}

fn without_timings(r: &FrameReport) -> String {
    let mut r = r.clone();
    r.step.timings = Default::default();
    r.blend_ms = 0.0;
    r.total_ms = 0.0;
    serde_json::to_string(&r).unwrap()
}

#[test]
fn worker_count_does_not_change_results() {
    let s = scene(24);
    let frames: Vec<_> = (0..s.frame_count()).map(|t| s.render(t).0).collect();
    let run = |workers| {
        let mut p = Pipeline::new(Config { workers, ..Default::default() }).unwrap();
        let reports: Vec<String> = frames.iter().enumerate().map(|(t, f)| without_timings(&p.process(t, f, None).unwrap())).collect();
        (reports, p.canvas().clone(), p.nodes_snapshot(frames.len() - 1))
    };
    let (ra, ca, na) = run(1);
    let (rb, cb, nb) = run(3);
    assert_eq!(ra, rb);
    assert_eq!(na, nb);
    assert_eq!(ca.weight, cb.weight);
    assert!(ca.color.iter().zip(&cb.color).all(|(x, y)| x.map(f32::to_bits) == y.map(f32::to_bits)));
}

#[test]
fn stats_lines_have_status_and_timings() {
    let s = scene(6);
    let mut p = Pipeline::new(Config { workers: 1, ..Default::default() }).unwrap();
    let mut statuses = Vec::new();
    for t in 0..s.frame_count() {
        let r = p.process(t, &s.render(t).0, None).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["frame", "status", "nodes", "mean_variance", "timings", "blended", "total_ms"] {
            assert!(v.get(key).is_some(), "missing {key} in {v}");
        }
        assert_eq!(r.blended, t % 2 == 0);
        statuses.push(r.status());
    }
    assert_eq!(statuses[0], FrameStatus::Initialized);
    assert_eq!(statuses[5], FrameStatus::LoopClosed);
    assert!(statuses[1..5].iter().all(|s| *s == FrameStatus::Tracked));

    let snap = p.slam().unwrap().snapshot(5);
    assert_eq!(snap["nodes"].as_array().unwrap().len(), p.graph().unwrap().nodes.len());
    assert!(!snap["keyframes"].as_array().unwrap().is_empty());
}

#[test]
fn manifest_matches_replace_the_detector() {
    let s = scene(12);
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    // Ground-truth correspondences on a grid for every consecutive pair.
    for t in 1..s.frame_count() {
        let mut m = Vec::new();
        for y in (8..128).step_by(12) {
            for x in (8..232).step_by(12) {
                let a = Vec2::new(x as f64 + 0.25, y as f64 + 0.5);
                let world = s.world_of_pixel(a, t - 1);
                m.push(MatchPair::new(a, s.project(world, t), 1.0));
            }
        }
        let name = format!("m{t}.txt");
        save_matches(&dir.path().join(&name), &m).unwrap();
        manifest.push_str(&format!("{} {t} {name}\n", t - 1));
    }
    let path = dir.path().join("manifest.txt");
    std::fs::write(&path, manifest).unwrap();
    let source = ManifestMatches::load(&path).unwrap();
    assert_eq!(source.len(), s.frame_count() - 1);

    let mut p = Pipeline::new(Config { workers: 1, loop_closing: false, ..Default::default() }).unwrap();
    let mut traj = Vec::new();
    for t in 0..s.frame_count() {
        let r = p.process(t, &s.render(t).0, Some(&source)).unwrap();
        if t > 0 {
            assert_eq!(r.step.tracking_matches, 19 * 10, "frame {t}");
        }
        traj.push(p.nodes_snapshot(t));
    }
    let report = evaluate(&s, &traj, None);
    assert!(report.node_rmse < 0.5, "{report:?}");
}
