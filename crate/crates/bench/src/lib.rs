//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrmosaic::synth::{SceneConfig, SyntheticScene};
use nrmosaic::{Config, MatchPair, Node, Pipeline, Vec2, WarpFunction};

/// Random similarity warps.
pub fn random_warps(n: usize, seed: u64) -> Vec<WarpFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            WarpFunction::from_params(
                rng.random_range(0.8..1.25),
                rng.random_range(-1.0..1.0),
                Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
            )
        })
        .collect()
}

/// Matches under a smooth warp with a fraction of uniform outliers.
pub fn planted_matches(n: usize, outlier_fraction: f64, seed: u64) -> Vec<MatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warp = WarpFunction::from_params(1.02, 0.05, Vec2::new(6.0, -4.0));
    (0..n)
        .map(|_| {
            let a = Vec2::new(rng.random_range(0.0..480.0), rng.random_range(0.0..270.0));
            let b = if rng.random_range(0.0..1.0) < outlier_fraction {
                Vec2::new(rng.random_range(0.0..480.0), rng.random_range(0.0..270.0))
            } else {
                warp.apply(a) + Vec2::new(6.0 * (a.y / 70.0).sin(), 5.0 * (a.x / 90.0).cos())
            };
            MatchPair::new(a, b, 1.0)
        })
        .collect()
}

/// Default-resolution scene with `frames` frames.
pub fn scene(frames: usize) -> SyntheticScene {
    SyntheticScene::new(SceneConfig { frames, ..Default::default() }).expect("default scene is valid")
}

/// Node graph after running the pipeline over the first `frames` frames.
pub fn tracked_nodes(scene: &SyntheticScene, frames: usize) -> (Vec<Node>, f64) {
    let mut p = Pipeline::new(Config { workers: 1, ..Default::default() }).expect("default config is valid");
    for t in 0..frames {
        p.process(t, &scene.render(t).0, None).expect("frame processed");
    }
    let alpha = p.params().expect("initialized").alpha;
    (p.graph().expect("initialized").nodes.clone(), alpha)
}
