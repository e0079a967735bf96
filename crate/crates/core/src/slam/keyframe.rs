//! Keyframe creation and selection by mean node displacement.

use crate::features::FrameFeatures;
use crate::Vec2;

use super::{KeyFrame, NodeGraph};

/// Mean displacement between current node positions and those stored in
/// `kf`, over the nodes the keyframe knows about.
pub fn keyframe_distance(kf: &KeyFrame, positions: &[Vec2]) -> f64 {
    let n = kf.node_count().min(positions.len());
    if n == 0 {
        return f64::INFINITY;
    }
    kf.node_positions[..n].iter().zip(positions).map(|(a, b)| (a - b).norm()).sum::<f64>() / n as f64
}

/// Keyframe indices sorted by distance to `positions`, nearest first.
/// Ties keep the older keyframe first.
pub fn rank_keyframes(graph: &NodeGraph, positions: &[Vec2]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = graph.keyframes.iter().enumerate().map(|(k, kf)| (k, keyframe_distance(kf, positions))).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Stores the current state as a keyframe if it is farther than `threshold`
/// from every existing keyframe. The first call always adds one.
pub fn maybe_add_keyframe(graph: &mut NodeGraph, t: usize, threshold: f64, features: &FrameFeatures) -> bool {
    let positions = graph.positions();
    let far = graph.keyframes.iter().all(|kf| keyframe_distance(kf, &positions) > threshold);
    if !far {
        return false;
    }
    graph.keyframes.push(KeyFrame {
        frame_index: t,
        features: features.clone(),
        node_positions: positions,
        node_warps: graph.warps(),
        node_variances: graph.variances(),
    });
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dq2::WarpFunction;
    use crate::slam::Node;

    fn graph() -> NodeGraph {
        let mut g = NodeGraph::new(60.0);
        for i in 0..4 {
            g.nodes.push(Node::new(Vec2::new(60.0 * i as f64, 0.0), WarpFunction::IDENTITY, 0.0));
        }
        g
    }

    fn shift_all(g: &mut NodeGraph, d: Vec2) {
        for n in &mut g.nodes {
            let w = WarpFunction::from_params(1.0, 0.0, n.warp.apply(Vec2::zeros()) + d);
            n.set_warp(w);
        }
    }

    #[test]
    fn first_is_always_added() {
        let mut g = graph();
        assert!(maybe_add_keyframe(&mut g, 0, 50.0, &FrameFeatures::default()));
        assert_eq!(g.keyframes[0].node_count(), 4);
    }

    #[test]
    fn stationary_not_added() {
        let mut g = graph();
        maybe_add_keyframe(&mut g, 0, 50.0, &FrameFeatures::default());
        assert!(!maybe_add_keyframe(&mut g, 1, 50.0, &FrameFeatures::default()));
    }

    #[test]
    fn displaced_beyond_threshold_added() {
        let h = 50.0;
        let mut g = graph();
        maybe_add_keyframe(&mut g, 0, h, &FrameFeatures::default());
        shift_all(&mut g, Vec2::new(h + 1.0, 0.0));
        assert!(maybe_add_keyframe(&mut g, 1, h, &FrameFeatures::default()));
        shift_all(&mut g, Vec2::new(h, 0.0));
        // h from keyframe 1 exactly: not strictly greater.
        assert!(!maybe_add_keyframe(&mut g, 2, h, &FrameFeatures::default()));
    }

    #[test]
    fn later_nodes_are_excluded() {
        let mut g = graph();
        maybe_add_keyframe(&mut g, 0, 10.0, &FrameFeatures::default());
        g.nodes.push(Node::new(Vec2::new(1000.0, 0.0), WarpFunction::from_params(1.0, 0.0, Vec2::new(500.0, 0.0)), 0.0));
        assert_eq!(keyframe_distance(&g.keyframes[0], &g.positions()), 0.0);
    }
}
