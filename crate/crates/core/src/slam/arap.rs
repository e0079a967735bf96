//! As-rigid-as-possible smoothing of node warps.
//!
//! Each node gets a closed-form similarity fit of its neighbours' motion
//! from time 0 to now; node warps are pulled toward that fit with a weight
//! that grows with the node's variance.

use nalgebra::Matrix2;
use rayon::prelude::*;

use crate::dq2::{BlendAccumulator, DualQuat2, WarpFunction};
use crate::Vec2;

#[derive(Clone, Debug, PartialEq)]
pub struct ArapParams {
    /// Neighbour weight exponent, 1/px².
    pub alpha: f64,
    /// Neighbours with lower weight are dropped.
    pub min_weight: f64,
    /// Variance attributed to the ARAP prediction.
    pub arap_variance: f64,
    pub max_iters: usize,
}

impl Default for ArapParams {
    fn default() -> Self {
        Self { alpha: 2e-4, min_weight: 1e-3, arap_variance: 100.0, max_iters: 5 }
    }
}

#[derive(Clone, Debug)]
pub struct ArapOutcome {
    pub warps: Vec<WarpFunction>,
    /// Total cost of the starting point followed by each accepted iteration.
    pub costs: Vec<f64>,
    pub accepted: usize,
}

/// Neighbour indices and weights of every node, self excluded.
fn neighborhoods(anchors: &[Vec2], alpha: f64, min_weight: f64) -> Vec<Vec<(usize, f64)>> {
    anchors
        .par_iter()
        .enumerate()
        .map(|(i, ai)| {
            anchors
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(j, aj)| {
                    let w = (-alpha * (ai - aj).norm_squared()).exp();
                    (w >= min_weight).then_some((j, w))
                })
                .collect()
        })
        .collect()
}

/// Similarity fit of a neighbourhood's motion around node `i`.
///
/// `anchors`/`positions` are the neighbours' time-0 and current coordinates.
/// Returns `None` when the neighbourhood is degenerate.
pub fn arap_fit(anchor_i: Vec2, position_i: Vec2, anchors: &[Vec2], positions: &[Vec2], weights: &[f64]) -> Option<WarpFunction> {
    let mut m = Matrix2::zeros();
    let (mut n0, mut nt) = (0.0, 0.0);
    for ((a, x), &w) in anchors.iter().zip(positions).zip(weights) {
        let c0 = w * (a - anchor_i);
        let ct = w * (x - position_i);
        m += ct * c0.transpose();
        n0 += c0.norm_squared();
        nt += ct.norm_squared();
    }
    if !(n0 > 1e-18) || !(nt > 0.0) {
        return None;
    }
    let svd = m.try_svd(true, true, f64::EPSILON, 0)?;
    let (mut u, v_t) = (svd.u?, svd.v_t?);
    if (u * v_t).determinant() < 0.0 {
        u.set_column(1, &(-u.column(1)));
    }
    let rot = u * v_t;
    let scale = (nt / n0).sqrt();
    let wsum: f64 = weights.iter().sum();
    let mut t = Vec2::zeros();
    for ((a, x), &w) in anchors.iter().zip(positions).zip(weights) {
        t += w * (x / scale - rot * a);
    }
    t /= wsum;
    let warp = WarpFunction::new(scale, DualQuat2::from_rotation_matrix(&rot, t));
    warp.is_valid().then_some(warp)
}

fn fits(anchors: &[Vec2], warps: &[WarpFunction], hoods: &[Vec<(usize, f64)>]) -> Vec<Option<WarpFunction>> {
    let positions: Vec<Vec2> = warps.iter().zip(anchors).map(|(w, a)| w.apply(*a)).collect();
    hoods
        .par_iter()
        .enumerate()
        .map(|(i, hood)| {
            if hood.is_empty() {
                return None;
            }
            let a: Vec<Vec2> = hood.iter().map(|&(j, _)| anchors[j]).collect();
            let x: Vec<Vec2> = hood.iter().map(|&(j, _)| positions[j]).collect();
            let w: Vec<f64> = hood.iter().map(|&(_, w)| w).collect();
            arap_fit(anchors[i], positions[i], &a, &x, &w)
        })
        .collect()
}

fn total_cost(anchors: &[Vec2], merged: &[WarpFunction], warps: &[WarpFunction], fits: &[Option<WarpFunction>], lambdas: &[f64]) -> f64 {
    (0..anchors.len())
        .map(|i| {
            let a = anchors[i];
            let x = warps[i].apply(a);
            let data = (merged[i].apply(a) - x).norm_squared();
            let reg = fits[i].map_or(0.0, |f| lambdas[i] * (f.apply(a) - x).norm_squared());
            data + reg
        })
        .sum()
}

/// Iteratively blends merged warps toward their ARAP fits, stopping early
/// when the total cost would increase.
pub fn arap_smooth(anchors: &[Vec2], merged: &[WarpFunction], variances: &[f64], params: &ArapParams) -> ArapOutcome {
    let n = anchors.len();
    debug_assert!(merged.len() == n && variances.len() == n);
    let hoods = neighborhoods(anchors, params.alpha, params.min_weight);
    let lambdas: Vec<f64> = variances.iter().map(|v| (1.0 + v) / (1.0 + params.arap_variance)).collect();

    let mut warps = merged.to_vec();
    let mut current_fits = fits(anchors, &warps, &hoods);
    let mut cost = total_cost(anchors, merged, &warps, &current_fits, &lambdas);
    let mut costs = vec![cost];
    let mut accepted = 0;
    for _ in 0..params.max_iters {
        if cost == 0.0 {
            break;
        }
        let next: Vec<WarpFunction> = (0..n)
            .into_par_iter()
            .map(|i| match current_fits[i] {
                Some(fit) => {
                    let mut acc = BlendAccumulator::default();
                    acc.add_warp(1.0, &merged[i]);
                    acc.add_warp(lambdas[i], &fit);
                    acc.finish().unwrap_or(merged[i])
                }
                None => merged[i],
            })
            .collect();
        let next_fits = fits(anchors, &next, &hoods);
        let next_cost = total_cost(anchors, merged, &next, &next_fits, &lambdas);
        if !(next_cost <= cost) {
            break;
        }
        warps = next;
        current_fits = next_fits;
        cost = next_cost;
        costs.push(cost);
        accepted += 1;
    }
    ArapOutcome { warps, costs, accepted }
}
