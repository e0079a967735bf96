//! Node graph state and the per-frame SLAM update.
//!
//! Nodes are never removed, so a node's index is stable for the whole run
//! and a keyframe only needs to record how many nodes existed when it was
//! created.

pub mod arap;
pub mod keyframe;
pub mod lattice;
pub mod system;
pub mod uncertainty;

use serde::{Deserialize, Serialize};

use crate::dq2::{warp_update, WarpFunction};
use crate::features::FrameFeatures;
use crate::fieldest::FieldEstimate;
use crate::{Error, Result, Vec2};

pub use arap::{arap_fit, arap_smooth, ArapOutcome, ArapParams};
pub use keyframe::{keyframe_distance, maybe_add_keyframe, rank_keyframes};
pub use lattice::{insert_nodes, Region};
pub use system::{FrameStatus, SlamSystem, StageTimings, StepReport};
pub use uncertainty::{
    clamp_node_variance, correlation, ekf_merge, fusion_weights, propagate_feature_uncertainty, propagate_variance, FeatureObservation,
    MergeBranch, MergeResult, VARIANCE_CEILING,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Reference-frame (time 0) position.
    pub anchor: Vec2,
    pub warp: WarpFunction,
    pub variance: f64,
    /// Cached `warp.apply(anchor)`: the node's position in the current frame.
    pub position: Vec2,
}

impl Node {
    pub fn new(anchor: Vec2, warp: WarpFunction, variance: f64) -> Self {
        Self { anchor, warp, variance, position: warp.apply(anchor) }
    }

    pub fn set_warp(&mut self, warp: WarpFunction) {
        self.warp = warp;
        self.position = warp.apply(self.anchor);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    /// Position in the current frame.
    pub position: Vec2,
    pub variance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyFrame {
    pub frame_index: usize,
    #[serde(skip)]
    pub features: FrameFeatures,
    /// Positions, warps and variances of nodes `0..node_positions.len()`,
    /// i.e. the nodes that existed when the keyframe was taken.
    pub node_positions: Vec<Vec2>,
    pub node_warps: Vec<WarpFunction>,
    pub node_variances: Vec<f64>,
}

impl KeyFrame {
    pub fn node_count(&self) -> usize {
        self.node_positions.len()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NodeGraph {
    pub nodes: Vec<Node>,
    pub feature_tracks: Vec<FeatureTrack>,
    pub keyframes: Vec<KeyFrame>,
    pub hex_spacing: f64,
}

impl NodeGraph {
    pub fn new(hex_spacing: f64) -> Self {
        Self { hex_spacing, ..Default::default() }
    }

    pub fn anchors(&self) -> Vec<Vec2> {
        self.nodes.iter().map(|n| n.anchor).collect()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn warps(&self) -> Vec<WarpFunction> {
        self.nodes.iter().map(|n| n.warp).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.variance).collect()
    }

    pub fn mean_variance(&self) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        self.nodes.iter().map(|n| n.variance).sum::<f64>() / self.nodes.len() as f64
    }
}

/// Per-node estimate produced by tracking or loop closing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeEstimate {
    pub warp: WarpFunction,
    pub variance: f64,
}

/// Applies a frame-to-frame field to every node.
pub fn track_step(graph: &NodeGraph, field: &FieldEstimate) -> Result<Vec<NodeEstimate>> {
    if field.node_increments.len() != graph.nodes.len() || field.node_uncertainties.len() != graph.nodes.len() {
        return Err(Error::LengthMismatch);
    }
    Ok(graph
        .nodes
        .iter()
        .zip(&field.node_increments)
        .zip(&field.node_uncertainties)
        .map(|((node, delta), &dvar)| NodeEstimate {
            warp: warp_update(&node.warp, delta),
            variance: propagate_variance(node.variance, delta.scale, dvar),
        })
        .collect())
}

/// Loop-closing result against one keyframe.
#[derive(Clone, Debug)]
pub struct LoopClosure {
    pub keyframe: usize,
    /// Estimates for the nodes that existed at the keyframe.
    pub estimates: Vec<NodeEstimate>,
    pub inliers: usize,
}

/// Re-derives node warps from a keyframe and a keyframe→current field.
///
/// `field` must have been estimated with the keyframe's node positions as
/// anchors.
pub fn loop_close_from_field(graph: &NodeGraph, keyframe: usize, field: &FieldEstimate) -> Result<LoopClosure> {
    let kf = &graph.keyframes[keyframe];
    if field.node_increments.len() != kf.node_count() {
        return Err(Error::LengthMismatch);
    }
    let estimates = kf
        .node_warps
        .iter()
        .zip(&kf.node_variances)
        .zip(field.node_increments.iter().zip(&field.node_uncertainties))
        .map(|((w, &v), (delta, &dvar))| NodeEstimate { warp: warp_update(w, delta), variance: propagate_variance(v, delta.scale, dvar) })
        .collect();
    Ok(LoopClosure { keyframe, estimates, inliers: field.inlier_count() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldest::DenseField;

    fn field(incs: Vec<WarpFunction>, var: f64) -> FieldEstimate {
        let n = incs.len();
        FieldEstimate {
            node_increments: incs,
            node_uncertainties: vec![var; n],
            inlier_flags: vec![],
            match_residuals: vec![],
            field: DenseField::default(),
        }
    }

    fn graph_with(anchors: &[Vec2]) -> NodeGraph {
        let mut g = NodeGraph::new(60.0);
        g.nodes = anchors.iter().map(|&a| Node::new(a, WarpFunction::IDENTITY, 0.0)).collect();
        g
    }

    #[test]
    fn identity_step() {
        let g = graph_with(&[Vec2::new(3.0, 4.0)]);
        let out = track_step(&g, &field(vec![WarpFunction::IDENTITY], 1.0)).unwrap();
        assert_eq!(out[0].warp.apply(Vec2::new(3.0, 4.0)), Vec2::new(3.0, 4.0));
        assert_eq!(out[0].variance, 1.0);
    }

    #[test]
    fn scaled_step_variance() {
        let mut g = graph_with(&[Vec2::zeros()]);
        g.nodes[0].variance = 3.0;
        let out = track_step(&g, &field(vec![WarpFunction::from_params(2.0, 0.0, Vec2::zeros())], 1.0)).unwrap();
        assert_eq!(out[0].variance, 13.0);
    }

    #[test]
    fn translations_compose() {
        let mut g = graph_with(&[Vec2::new(10.0, 20.0)]);
        for t in [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)] {
            let out = track_step(&g, &field(vec![WarpFunction::from_params(1.0, 0.0, t)], 0.0)).unwrap();
            g.nodes[0].set_warp(out[0].warp);
        }
        assert!((g.nodes[0].position - Vec2::new(11.0, 21.0)).norm() < 1e-12);
    }

    #[test]
    fn coverage_mismatch_is_an_error() {
        let g = graph_with(&[Vec2::zeros(), Vec2::new(1.0, 1.0)]);
        assert!(track_step(&g, &field(vec![WarpFunction::IDENTITY], 0.0)).is_err());
    }
}
