//! Scalar uncertainty bookkeeping: propagation along the tracking chain,
//! the node/feature spatial bound, and two-sensor fusion of tracking and
//! loop-closing estimates.

use serde::{Deserialize, Serialize};

use crate::dq2::{BlendAccumulator, WarpFunction};
use crate::Vec2;

use super::FeatureTrack;

/// Variances are saturated here instead of overflowing to infinity.
pub const VARIANCE_CEILING: f64 = 1e300;

#[inline]
pub(crate) fn saturate(v: f64) -> f64 {
    if v.is_nan() {
        VARIANCE_CEILING
    } else {
        v.min(VARIANCE_CEILING)
    }
}

/// Variance after applying an increment with scale `delta_scale` and
/// increment variance `delta_variance` to an estimate with variance `prior`.
#[inline]
pub fn propagate_variance(prior: f64, delta_scale: f64, delta_variance: f64) -> f64 {
    saturate(delta_scale * delta_scale * prior + delta_variance)
}

/// How a feature was observed in the latest field estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureObservation {
    /// Matched consistently; squared residual in px².
    Inlier { residual_sq: f64 },
    /// Rejected; the field's scale and increment variance at the feature.
    Outlier { delta_scale: f64, delta_variance: f64 },
}

/// Inliers accumulate their squared residual; outliers are carried by the
/// field like nodes are.
pub fn propagate_feature_uncertainty(track: &FeatureTrack, obs: FeatureObservation) -> FeatureTrack {
    let variance = match obs {
        FeatureObservation::Inlier { residual_sq } => saturate(track.variance + residual_sq.max(0.0)),
        FeatureObservation::Outlier { delta_scale, delta_variance } => propagate_variance(track.variance, delta_scale, delta_variance),
    };
    FeatureTrack { position: track.position, variance }
}

/// Upper-bounds a node's variance by every feature's
/// `σ²_feature + exp(β·d²)`.
pub fn clamp_node_variance(node_variance: f64, tracks: &[FeatureTrack], node_position: Vec2, beta: f64) -> f64 {
    tracks.iter().fold(node_variance, |v, f| {
        let bound = f.variance + (beta * (f.position - node_position).norm_squared()).exp();
        v.min(bound)
    })
}

/// Which branch the fusion took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeBranch {
    /// Covariance-weighted average of both estimates.
    Fused,
    /// Weights were invalid (negative or singular covariance); the estimate
    /// with the smaller variance was kept.
    KeptTracking,
    KeptLoop,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeResult {
    pub warp: WarpFunction,
    pub variance: f64,
    /// Weights of (tracking, loop); sum to one when fused.
    pub weights: [f64; 2],
    pub correlation: f64,
    pub branch: MergeBranch,
}

/// Correlation between the two sensors, decaying with how far the node has
/// moved since the keyframe.
#[inline]
pub fn correlation(position_now: Vec2, position_at_keyframe: Vec2, gamma: f64) -> f64 {
    (-gamma * (position_now - position_at_keyframe).norm_squared()).exp()
}

/// Fusion variance and weights for two correlated scalar estimates with
/// covariance `[[a, η√(ab)], [η√(ab), b]]`.
///
/// Returns `None` when the covariance is singular or a weight is negative.
pub fn fusion_weights(var_track: f64, var_loop: f64, eta: f64) -> Option<(f64, [f64; 2])> {
    if !(var_track > 0.0 && var_loop > 0.0) || !var_track.is_finite() || !var_loop.is_finite() {
        return None;
    }
    let (st, sl) = (var_track.sqrt(), var_loop.sqrt());
    let c = eta * st * sl;
    // Σ(A⁻¹) = (a + b − 2c) / det, and A⁻¹·1 = [b − c, a − c] / det.
    let denom = var_track + var_loop - 2.0 * c;
    let det_rel = 1.0 - eta * eta;
    if !(det_rel > 0.0) || !(denom > 0.0) {
        return None;
    }
    let w_track = (var_loop - c) / denom;
    let w_loop = (var_track - c) / denom;
    if w_track < 0.0 || w_loop < 0.0 {
        return None;
    }
    // σ² = det / Σ(A⁻¹) = a·b·(1 − η²) / (a + b − 2c), arranged to avoid overflow.
    let variance = var_track * (var_loop * det_rel / denom);
    Some((variance, [w_track, w_loop]))
}

/// Fuses the tracking and loop-closing estimates of one node.
pub fn ekf_merge(
    warp_track: &WarpFunction,
    var_track: f64,
    warp_loop: &WarpFunction,
    var_loop: f64,
    position_now: Vec2,
    position_at_keyframe: Vec2,
    gamma: f64,
) -> MergeResult {
    let eta = correlation(position_now, position_at_keyframe, gamma);
    if let Some((variance, weights)) = fusion_weights(var_track, var_loop, eta) {
        let mut acc = BlendAccumulator::default();
        acc.add_warp(weights[0], warp_track);
        acc.add_warp(weights[1], warp_loop);
        if let Some(warp) = acc.finish() {
            return MergeResult { warp, variance, weights, correlation: eta, branch: MergeBranch::Fused };
        }
    }
    if var_loop < var_track {
        MergeResult { warp: *warp_loop, variance: var_loop, weights: [0.0, 1.0], correlation: eta, branch: MergeBranch::KeptLoop }
    } else {
        MergeResult { warp: *warp_track, variance: var_track, weights: [1.0, 0.0], correlation: eta, branch: MergeBranch::KeptTracking }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn track(v: f64) -> FeatureTrack {
        FeatureTrack { position: Vec2::zeros(), variance: v }
    }

    #[test]
    fn tracking_variance_examples() {
        assert_eq!(propagate_variance(0.0, 1.0, 1.0), 1.0);
        assert_eq!(propagate_variance(3.0, 2.0, 1.0), 13.0);
        assert_eq!(propagate_variance(1e200, 1e100, 1.0), VARIANCE_CEILING);
    }

    #[test]
    fn feature_propagation_examples() {
        let t = propagate_feature_uncertainty(&track(1.0), FeatureObservation::Inlier { residual_sq: 0.0 });
        assert_eq!(t.variance, 1.0);
        let t = propagate_feature_uncertainty(&track(1.0), FeatureObservation::Inlier { residual_sq: 0.25 });
        assert_eq!(t.variance, 1.25);
        let t = propagate_feature_uncertainty(&track(1.0), FeatureObservation::Outlier { delta_scale: 1.0, delta_variance: 2.0 });
        assert_eq!(t.variance, 3.0);
    }

    #[test]
    fn clamp_examples() {
        let at = |x: f64, v: f64| FeatureTrack { position: Vec2::new(x, 0.0), variance: v };
        assert!(clamp_node_variance(7.0, &[at(0.0, 0.0)], Vec2::zeros(), 3e-3) <= 1.0);
        // bound = 5 + exp(0) = 6 > 5
        assert_eq!(clamp_node_variance(5.0, &[at(0.0, 5.0)], Vec2::zeros(), 3e-3), 5.0);
        let beta = 3e-3;
        let d = (3f64.ln() / beta).sqrt();
        assert_relative_eq!(clamp_node_variance(50.0, &[at(d, 2.0)], Vec2::zeros(), beta), 5.0, max_relative = 1e-12);
        assert_eq!(clamp_node_variance(50.0, &[], Vec2::zeros(), beta), 50.0);
    }

    #[test]
    fn merge_uncorrelated_equal() {
        let a = WarpFunction::from_params(1.0, 0.0, Vec2::new(0.0, 0.0));
        let b = WarpFunction::from_params(1.0, 0.0, Vec2::new(2.0, 0.0));
        // Far apart: η = exp(−γ·10⁴) ≈ 0.
        let m = ekf_merge(&a, 1.0, &b, 1.0, Vec2::new(100.0, 0.0), Vec2::zeros(), 5e-3);
        assert_eq!(m.branch, MergeBranch::Fused);
        assert_relative_eq!(m.weights[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(m.variance, 0.5, max_relative = 1e-12);
        assert!((m.warp.apply(Vec2::zeros()) - Vec2::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn merge_with_absent_loop_keeps_tracking() {
        let a = WarpFunction::from_params(1.1, 0.2, Vec2::new(3.0, 1.0));
        let b = WarpFunction::from_params(0.9, -0.3, Vec2::new(-5.0, 4.0));
        let m = ekf_merge(&a, 2.0, &b, f64::INFINITY, Vec2::zeros(), Vec2::zeros(), 5e-3);
        assert_eq!(m.warp, a);
        assert_eq!(m.variance, 2.0);
        let m = ekf_merge(&a, 2.0, &b, 1e12, Vec2::new(50.0, 0.0), Vec2::zeros(), 5e-3);
        assert!((m.warp.apply(Vec2::new(7.0, 7.0)) - a.apply(Vec2::new(7.0, 7.0))).norm() < 1e-9);
    }

    #[test]
    fn merge_singular_falls_back_to_tracking() {
        let a = WarpFunction::from_params(1.0, 0.0, Vec2::new(1.0, 0.0));
        let b = WarpFunction::from_params(1.0, 0.0, Vec2::new(9.0, 0.0));
        let m = ekf_merge(&a, 4.0, &b, 4.0, Vec2::new(3.0, 3.0), Vec2::new(3.0, 3.0), 5e-3);
        assert_eq!(m.correlation, 1.0);
        assert_eq!(m.branch, MergeBranch::KeptTracking);
        assert_eq!(m.warp, a);
        assert_eq!(m.variance, 4.0);
    }

    #[test]
    fn negative_weight_keeps_smaller_variance() {
        // σ_loop < η·σ_track makes the tracking weight negative.
        let a = WarpFunction::IDENTITY;
        let b = WarpFunction::from_params(1.0, 0.0, Vec2::new(1.0, 0.0));
        let m = ekf_merge(&a, 100.0, &b, 1.0, Vec2::new(1.0, 0.0), Vec2::zeros(), 5e-3);
        assert_eq!(m.branch, MergeBranch::KeptLoop);
        assert_eq!(m.variance, 1.0);
    }
}
