//! Frame-by-frame SLAM driver: tracking, loop closing, fusion, smoothing,
//! keyframes and node insertion.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::EffectiveParams;
use crate::dq2::{BlendAccumulator, WarpFunction};
use crate::features::{detect, match_features, FrameFeatures, MatchPair};
use crate::fieldest::{estimate_field, node_uncertainty, FieldEstimate};
use crate::raster::GrayImage;
use crate::{mosaic, Vec2};

use super::arap::{arap_smooth, ArapParams};
use super::keyframe::{maybe_add_keyframe, rank_keyframes};
use super::lattice::{insert_nodes, Region};
use super::uncertainty::{clamp_node_variance, ekf_merge, propagate_feature_uncertainty, FeatureObservation, MergeBranch};
use super::{loop_close_from_field, track_step, FeatureTrack, LoopClosure, NodeEstimate, NodeGraph};

/// Supplies precomputed matches between two frame indices.
pub trait MatchSource: Send + Sync {
    /// Matches from frame `from` (point_a) to frame `to` (point_b), or
    /// `None` to fall back to the built-in detector.
    fn matches(&self, from: usize, to: usize) -> Option<Vec<MatchPair>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameStatus {
    /// First frame; defines the reference coordinates.
    Initialized,
    Tracked,
    /// Tracked and fused with a loop-closing estimate.
    LoopClosed,
    /// Tracking failed and a keyframe match replaced it.
    Relocalized,
    /// Nothing could be estimated; the state was left untouched.
    Lost,
}

impl FrameStatus {
    pub fn is_lost(self) -> bool {
        self == FrameStatus::Lost
    }
}

/// Wall time per stage, milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect: f64,
    pub track: f64,
    pub loop_close: f64,
    pub merge: f64,
    pub arap: f64,
    pub insert: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub frame: usize,
    pub status: FrameStatus,
    pub nodes: usize,
    pub nodes_added: usize,
    pub mean_variance: f64,
    pub features: usize,
    pub tracking_matches: usize,
    pub tracking_inliers: usize,
    pub loop_keyframe: Option<usize>,
    pub loop_inliers: usize,
    pub fused_nodes: usize,
    pub arap_iterations: usize,
    pub keyframe_added: bool,
    pub keyframes: usize,
    pub timings: StageTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct PreviousFrame {
    index: usize,
    features: FrameFeatures,
}

/// SLAM state for one sequence.
pub struct SlamSystem {
    pub params: EffectiveParams,
    pub graph: NodeGraph,
    width: usize,
    height: usize,
    prev: Option<PreviousFrame>,
}

impl SlamSystem {
    pub fn new(params: EffectiveParams, width: usize, height: usize) -> Self {
        let graph = NodeGraph::new(params.hex_spacing);
        Self { params, graph, width, height, prev: None }
    }

    pub fn is_initialized(&self) -> bool {
        self.prev.is_some()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn arap_params(&self) -> ArapParams {
        ArapParams {
            alpha: self.params.alpha,
            min_weight: self.params.arap_min_weight,
            arap_variance: self.params.arap_variance,
            max_iters: self.params.arap_iters,
        }
    }

    fn get_matches(
        &self,
        source: Option<&dyn MatchSource>,
        from: usize,
        from_features: &FrameFeatures,
        to: usize,
        to_features: &FrameFeatures,
    ) -> Vec<MatchPair> {
        source.and_then(|s| s.matches(from, to)).unwrap_or_else(|| match_features(from_features, to_features, &self.params.detector))
    }

    /// Advances the state by one frame.
    pub fn process_frame(&mut self, t: usize, frame: &GrayImage, source: Option<&dyn MatchSource>) -> StepReport {
        let mut timings = StageTimings::default();
        let clock = Instant::now();
        let features = detect(frame, &self.params.detector);
        timings.detect = ms_since(clock);

        let mut report = StepReport {
            frame: t,
            status: FrameStatus::Lost,
            nodes: 0,
            nodes_added: 0,
            mean_variance: 0.0,
            features: features.len(),
            tracking_matches: 0,
            tracking_inliers: 0,
            loop_keyframe: None,
            loop_inliers: 0,
            fused_nodes: 0,
            arap_iterations: 0,
            keyframe_added: false,
            keyframes: 0,
            timings,
        };

        let Some(prev) = self.prev.take() else {
            self.initialize(t, features, &mut report);
            return self.finish_report(report);
        };

        let clock = Instant::now();
        let matches = self.get_matches(source, prev.index, &prev.features, t, &features);
        report.tracking_matches = matches.len();
        let prev_positions = self.graph.positions();
        let tracked = estimate_field(&matches, &prev_positions, &self.params.estimator)
            .ok()
            .and_then(|f| track_step(&self.graph, &f).ok().map(|est| (f, est)));
        report.timings.track = ms_since(clock);

        let (estimates, tracks) = match tracked {
            Some((field, mut est)) => {
                report.tracking_inliers = field.inlier_count();
                report.status = FrameStatus::Tracked;
                let tracks = self.update_feature_tracks(&matches, &field, &prev_positions);
                for (e, a) in est.iter_mut().zip(self.graph.nodes.iter().map(|n| n.anchor)) {
                    let pos = e.warp.apply(a);
                    e.variance = clamp_node_variance(e.variance, &tracks, pos, self.params.beta);
                }
                if self.params.loop_closing && t.is_multiple_of(self.params.loop_stride) {
                    self.fuse_loop_closure(t, &features, source, &mut est, &mut report);
                }
                (est, tracks)
            }
            None => {
                let clock = Instant::now();
                let reloc = self.relocalize(t, &features, source, &prev_positions);
                report.timings.loop_close = ms_since(clock);
                match reloc {
                    Some((lc, est)) => {
                        report.status = FrameStatus::Relocalized;
                        report.loop_keyframe = Some(lc.keyframe);
                        report.loop_inliers = lc.inliers;
                        (est, Vec::new())
                    }
                    None => {
                        // Keep the previous frame as the tracking reference.
                        self.prev = Some(prev);
                        return self.finish_report(report);
                    }
                }
            }
        };

        let clock = Instant::now();
        let anchors = self.graph.anchors();
        let merged: Vec<WarpFunction> = estimates.iter().map(|e| e.warp).collect();
        let variances: Vec<f64> = estimates.iter().map(|e| e.variance).collect();
        let smoothed = arap_smooth(&anchors, &merged, &variances, &self.arap_params());
        report.arap_iterations = smoothed.accepted;
        for ((node, w), v) in self.graph.nodes.iter_mut().zip(smoothed.warps).zip(variances) {
            node.set_warp(w);
            node.variance = v;
        }
        self.graph.feature_tracks = tracks;
        report.timings.arap = ms_since(clock);

        let clock = Instant::now();
        report.keyframe_added = maybe_add_keyframe(&mut self.graph, t, self.params.keyframe_h, &features);
        if let Some(region) = mosaic::frame_footprint(&self.graph.nodes, self.params.alpha, self.width, self.height) {
            report.nodes_added = insert_nodes(&mut self.graph, &region, self.params.alpha);
        }
        report.timings.insert = ms_since(clock);

        self.prev = Some(PreviousFrame { index: t, features });
        self.finish_report(report)
    }

    fn finish_report(&self, mut report: StepReport) -> StepReport {
        report.nodes = self.graph.nodes.len();
        report.mean_variance = self.graph.mean_variance();
        report.keyframes = self.graph.keyframes.len();
        report
    }

    fn initialize(&mut self, t: usize, features: FrameFeatures, report: &mut StepReport) {
        let region = Region::rect(self.width as f64, self.height as f64);
        report.nodes_added = insert_nodes(&mut self.graph, &region, self.params.alpha);
        self.graph.feature_tracks = features.keypoints.iter().map(|k| FeatureTrack { position: k.position, variance: 0.0 }).collect();
        report.keyframe_added = maybe_add_keyframe(&mut self.graph, t, self.params.keyframe_h, &features);
        report.status = FrameStatus::Initialized;
        self.prev = Some(PreviousFrame { index: t, features });
    }

    /// Carries feature variances along the tracking chain. Tracks are keyed
    /// by position: a match continues the track ending at its source point.
    fn update_feature_tracks(&self, matches: &[MatchPair], field: &FieldEstimate, prev_positions: &[Vec2]) -> Vec<FeatureTrack> {
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        let cell = |p: Vec2| (p.x.floor() as i64, p.y.floor() as i64);
        for (k, tr) in self.graph.feature_tracks.iter().enumerate() {
            grid.entry(cell(tr.position)).or_default().push(k);
        }
        let previous = |p: Vec2| -> Option<&FeatureTrack> {
            let (cx, cy) = cell(p);
            let mut best: Option<(f64, usize)> = None;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    for &k in grid.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                        let d = (self.graph.feature_tracks[k].position - p).norm_squared();
                        if d <= 0.25 && best.is_none_or(|(bd, bk)| d < bd || (d == bd && k < bk)) {
                            best = Some((d, k));
                        }
                    }
                }
            }
            best.map(|(_, k)| &self.graph.feature_tracks[k])
        };
        let inliers = field.inlier_positions();
        matches
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let prior = previous(m.point_a)
                    .copied()
                    .unwrap_or_else(|| FeatureTrack { position: m.point_a, variance: self.variance_at(m.point_a, prev_positions) });
                let residual = field.match_residuals.get(j).copied().unwrap_or(f64::INFINITY);
                if field.inlier_flags[j] && residual.is_finite() {
                    let mut tr = propagate_feature_uncertainty(&prior, FeatureObservation::Inlier { residual_sq: residual });
                    tr.position = m.point_b;
                    tr
                } else {
                    let (scale, position) = match field.field.warp_at(m.point_a) {
                        Some(w) => (w.scale, w.apply(m.point_a)),
                        None => (1.0, m.point_b),
                    };
                    let dvar = node_uncertainty(m.point_a, inliers, self.params.beta).unwrap_or(f64::INFINITY);
                    let mut tr =
                        propagate_feature_uncertainty(&prior, FeatureObservation::Outlier { delta_scale: scale, delta_variance: dvar });
                    tr.position = position;
                    tr
                }
            })
            .collect()
    }

    /// Node variance interpolated at a current-frame position.
    fn variance_at(&self, p: Vec2, positions: &[Vec2]) -> f64 {
        let d2: Vec<f64> = positions.iter().map(|x| (x - p).norm_squared()).collect();
        let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let (mut vs, mut ws) = (0.0, 0.0);
        for (n, d) in self.graph.nodes.iter().zip(&d2) {
            let w = (-self.params.alpha * (d - dmin)).exp();
            vs += w * n.variance;
            ws += w;
        }
        if ws > 0.0 {
            vs / ws
        } else {
            0.0
        }
    }

    fn close_against(&self, k: usize, t: usize, features: &FrameFeatures, source: Option<&dyn MatchSource>) -> Option<LoopClosure> {
        let kf = &self.graph.keyframes[k];
        let matches = self.get_matches(source, kf.frame_index, &kf.features, t, features);
        let field = estimate_field(&matches, &kf.node_positions, &self.params.estimator).ok()?;
        loop_close_from_field(&self.graph, k, &field).ok()
    }

    fn fuse_loop_closure(
        &self,
        t: usize,
        features: &FrameFeatures,
        source: Option<&dyn MatchSource>,
        est: &mut [NodeEstimate],
        report: &mut StepReport,
    ) {
        let clock = Instant::now();
        let tracked_positions: Vec<Vec2> = est.iter().zip(&self.graph.nodes).map(|(e, n)| e.warp.apply(n.anchor)).collect();
        let best = rank_keyframes(&self.graph, &tracked_positions).first().map(|&(k, _)| k);
        let lc = best.and_then(|k| self.close_against(k, t, features, source));
        report.timings.loop_close = ms_since(clock);
        let Some(lc) = lc else { return };

        let clock = Instant::now();
        let kf = &self.graph.keyframes[lc.keyframe];
        for (i, l) in lc.estimates.iter().enumerate() {
            let m = ekf_merge(
                &est[i].warp,
                est[i].variance,
                &l.warp,
                l.variance,
                tracked_positions[i],
                kf.node_positions[i],
                self.params.gamma,
            );
            if m.branch == MergeBranch::Fused {
                report.fused_nodes += 1;
            }
            est[i] = NodeEstimate { warp: m.warp, variance: m.variance };
        }
        report.status = FrameStatus::LoopClosed;
        report.loop_keyframe = Some(lc.keyframe);
        report.loop_inliers = lc.inliers;
        report.timings.merge = ms_since(clock);
    }

    /// Tries every keyframe, nearest first. Nodes newer than the matched
    /// keyframe are re-interpolated from the re-anchored ones.
    fn relocalize(
        &self,
        t: usize,
        features: &FrameFeatures,
        source: Option<&dyn MatchSource>,
        positions: &[Vec2],
    ) -> Option<(LoopClosure, Vec<NodeEstimate>)> {
        let lc = rank_keyframes(&self.graph, positions).into_iter().find_map(|(k, _)| self.close_against(k, t, features, source))?;
        let n_k = lc.estimates.len();
        let mut est = lc.estimates.clone();
        let anchors = self.graph.anchors();
        for node in &self.graph.nodes[n_k..] {
            let d2: Vec<f64> = anchors[..n_k].iter().map(|a| (a - node.anchor).norm_squared()).collect();
            let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let mut acc = BlendAccumulator::default();
            let (mut vs, mut ws) = (0.0, 0.0);
            for (e, d) in lc.estimates.iter().zip(&d2) {
                let w = (-self.params.alpha * (d - dmin)).exp();
                acc.add_warp(w, &e.warp);
                vs += w * e.variance;
                ws += w;
            }
            est.push(NodeEstimate { warp: acc.finish().unwrap_or(node.warp), variance: vs / ws });
        }
        Some((lc, est))
    }

    /// JSON snapshot of nodes and keyframes for debugging and tests.
    pub fn snapshot(&self, frame: usize) -> serde_json::Value {
        serde_json::json!({
            "frame": frame,
            "nodes": self.graph.nodes.iter().map(|n| serde_json::json!({
                "anchor": [n.anchor.x, n.anchor.y],
                "position": [n.position.x, n.position.y],
                "scale": n.warp.scale,
                "dq": [n.warp.dq.real[0], n.warp.dq.real[1], n.warp.dq.dual[0], n.warp.dq.dual[1]],
                "variance": n.variance,
            })).collect::<Vec<_>>(),
            "keyframes": self.graph.keyframes.iter().map(|k| serde_json::json!({
                "frame": k.frame_index,
                "nodes": k.node_count(),
            })).collect::<Vec<_>>(),
        })
    }
}
