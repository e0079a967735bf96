//! Online driver: one call per frame, tracking every frame and blending
//! every `blend_stride`-th.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{resolve_scaled_params, Config, EffectiveParams};
use crate::features::{load_matches, MatchPair};
use crate::mosaic::{BlendStats, Canvas};
use crate::raster::ColorImage;
use crate::slam::system::{MatchSource, SlamSystem, StepReport};
use crate::slam::NodeGraph;
use crate::synth::FrameNodes;
use crate::{Error, Result};

pub use crate::slam::FrameStatus;

/// One line of the per-frame stats log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    #[serde(flatten)]
    pub step: StepReport,
    pub blended: bool,
    pub blend: Option<BlendStats>,
    pub blend_ms: f64,
    pub total_ms: f64,
}

impl FrameReport {
    pub fn status(&self) -> FrameStatus {
        self.step.status
    }
}

/// Matches listed in a manifest of `from to path` lines; paths are relative
/// to the manifest's directory. Pairs not listed fall back to the detector.
#[derive(Clone, Debug, Default)]
pub struct ManifestMatches {
    files: HashMap<(usize, usize), PathBuf>,
}

impl ManifestMatches {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut files = HashMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse { path: path.display().to_string(), line: k + 1, msg: msg.into() };
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), Some(p), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err("expected `from to path`"));
            };
            let a = a.parse().map_err(|_| parse_err("bad frame index"))?;
            let b = b.parse().map_err(|_| parse_err("bad frame index"))?;
            files.insert((a, b), base.join(p));
        }
        Ok(Self { files })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl MatchSource for ManifestMatches {
    fn matches(&self, from: usize, to: usize) -> Option<Vec<MatchPair>> {
        let path = self.files.get(&(from, to))?;
        match load_matches(path) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("ignoring match file {}: {e}", path.display());
                None
            }
        }
    }
}

pub struct Pipeline {
    config: Config,
    params: Option<EffectiveParams>,
    slam: Option<SlamSystem>,
    canvas: Canvas,
    pool: rayon::ThreadPool,
    first_frame: Option<usize>,
}

impl Pipeline {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config { field: "workers".into(), msg: e.to_string() })?;
        let canvas = Canvas::new(config.max_merge_weight);
        Ok(Self { config, params: None, slam: None, canvas, pool, first_frame: None })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Effective parameters, known once the first frame fixes the resolution.
    pub fn params(&self) -> Option<&EffectiveParams> {
        self.params.as_ref()
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn canvas(&self) -> &Canvas {
        &self.canvas
    }

    pub fn graph(&self) -> Option<&NodeGraph> {
        self.slam.as_ref().map(|s| &s.graph)
    }

    pub fn slam(&self) -> Option<&SlamSystem> {
        self.slam.as_ref()
    }

    /// Current node anchors and positions.
    pub fn nodes_snapshot(&self, frame: usize) -> FrameNodes {
        let Some(g) = self.graph() else { return FrameNodes { frame, ..Default::default() } };
        FrameNodes { frame, anchors: g.anchors(), positions: g.positions() }
    }

    pub fn process(&mut self, t: usize, frame: &ColorImage, source: Option<&dyn MatchSource>) -> Result<FrameReport> {
        if frame.is_empty() {
            return Err(Error::Format(format!("frame {t} is empty")));
        }
        let start = Instant::now();
        let slam = match &mut self.slam {
            Some(s) => {
                if s.frame_size() != (frame.width, frame.height) {
                    return Err(Error::Format(format!(
                        "frame {t} is {}×{}, sequence is {}×{}",
                        frame.width,
                        frame.height,
                        s.frame_size().0,
                        s.frame_size().1
                    )));
                }
                s
            }
            None => {
                let params = resolve_scaled_params(&self.config, frame.width, frame.height);
                self.params = Some(params.clone());
                self.first_frame = Some(t);
                self.slam.insert(SlamSystem::new(params, frame.width, frame.height))
            }
        };
        let gray = frame.to_gray();
        let step = self.pool.install(|| slam.process_frame(t, &gray, source));

        let first = self.first_frame.unwrap_or(t);
        let stride = self.config.blend_stride.max(1);
        let blend_now = !step.status.is_lost() && t.saturating_sub(first).is_multiple_of(stride);
        let clock = Instant::now();
        let blend = if blend_now {
            let alpha = slam.params.alpha;
            let nodes = &slam.graph.nodes;
            let canvas = &mut self.canvas;
            Some(self.pool.install(|| canvas.blend_frame(frame, nodes, alpha)))
        } else {
            None
        };
        let blend_ms = clock.elapsed().as_secs_f64() * 1e3;
        Ok(FrameReport { step, blended: blend.is_some(), blend, blend_ms, total_ms: start.elapsed().as_secs_f64() * 1e3 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_reproduce_the_first() {
        let (w, h) = (120, 80);
        let frame = crate::synth::SyntheticScene::new(crate::synth::SceneConfig {
            width: w,
            height: h,
            frames: 1,
            path: crate::synth::PathKind::Static,
            ..Default::default()
        })
        .unwrap()
        .render(0)
        .0;
        let mut p = Pipeline::new(Config { workers: 1, ..Default::default() }).unwrap();
        for t in 0..5 {
            let r = p.process(t, &frame, None).unwrap();
            assert!(!r.status().is_lost(), "{r:?}");
        }
        for n in &p.graph().unwrap().nodes {
            assert!((n.position - n.anchor).norm() < 1e-6, "{:?}", n);
        }
        let r = p.canvas().render(true);
        assert_eq!((r.image.width, r.image.height), (w, h));
        let max_err =
            r.image.data.iter().zip(&frame.data).map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f32::max)).fold(0.0, f32::max);
        assert!(max_err < 1e-4, "{max_err}");
    }

    #[test]
    fn blank_frame_is_lost_and_recovered() {
        let scene = crate::synth::SyntheticScene::new(crate::synth::SceneConfig {
            width: 160,
            height: 100,
            frames: 8,
            path_extent: [14.0, 0.0],
            path_rotation: 0.0,
            path_zoom: 1.0,
            max_displacement: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut p = Pipeline::new(Config { workers: 1, ..Default::default() }).unwrap();
        for t in 0..3 {
            p.process(t, &scene.render(t).0, None).unwrap();
        }
        let before = p.nodes_snapshot(2);
        let blank = ColorImage::filled(160, 100, [0.5, 0.5, 0.5]);
        let r = p.process(3, &blank, None).unwrap();
        assert_eq!(r.status(), FrameStatus::Lost);
        assert!(!r.blended);
        assert_eq!(p.nodes_snapshot(2), before);
        let r = p.process(4, &scene.render(4).0, None).unwrap();
        assert!(!r.status().is_lost(), "{:?}", r.status());
    }

    #[test]
    fn manifest_parse_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "0 1 a.txt\nnot valid\n").unwrap();
        let e = ManifestMatches::load(&path).unwrap_err();
        assert!(e.to_string().contains(":2:"), "{e}");
    }
}
