//! Hexagonal node lattice growth.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dq2::{BlendAccumulator, WarpFunction};
use crate::Vec2;

use super::{Node, NodeGraph};

/// Area in reference-frame coordinates that nodes must cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Rect {
        min: Vec2,
        max: Vec2,
    },
    /// Simple polygon, vertices in order.
    Polygon(Vec<Vec2>),
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + t * ab)).norm()
}

impl Region {
    pub fn rect(width: f64, height: f64) -> Self {
        Region::Rect { min: Vec2::zeros(), max: Vec2::new(width, height) }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Region::Rect { min, max } => p.x >= min.x && p.y >= min.y && p.x <= max.x && p.y <= max.y,
            Region::Polygon(v) => {
                let mut inside = false;
                let n = v.len();
                for i in 0..n {
                    let (a, b) = (v[i], v[(i + 1) % n]);
                    if (a.y > p.y) != (b.y > p.y) {
                        let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                        if p.x < x {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    /// Euclidean distance to the region, zero inside.
    pub fn distance(&self, p: Vec2) -> f64 {
        match self {
            Region::Rect { min, max } => {
                let dx = (min.x - p.x).max(0.0).max(p.x - max.x);
                let dy = (min.y - p.y).max(0.0).max(p.y - max.y);
                dx.hypot(dy)
            }
            Region::Polygon(v) => {
                if v.is_empty() {
                    return f64::INFINITY;
                }
                if self.contains(p) {
                    return 0.0;
                }
                let n = v.len();
                (0..n).map(|i| segment_distance(p, v[i], v[(i + 1) % n])).fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Vec2, Vec2) {
        match self {
            Region::Rect { min, max } => (*min, *max),
            Region::Polygon(v) => {
                v.iter().fold((Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Region::Rect { min, max } => (max.x - min.x).max(0.0) * (max.y - min.y).max(0.0),
            Region::Polygon(v) => {
                let n = v.len();
                (0..n).map(|i| v[i].perp(&v[(i + 1) % n])).sum::<f64>().abs() / 2.0
            }
        }
    }

    /// A point inside or on the region.
    fn seed_point(&self) -> Option<Vec2> {
        match self {
            Region::Rect { min, max } => Some((min + max) / 2.0),
            Region::Polygon(v) => v.first().copied(),
        }
    }
}

struct Lattice {
    origin: Vec2,
    h: f64,
}

impl Lattice {
    const STEPS: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)];

    fn point(&self, (i, j): (i64, i64)) -> Vec2 {
        let r3 = 3f64.sqrt() / 2.0;
        self.origin + Vec2::new(self.h * (i as f64 + 0.5 * j as f64), self.h * r3 * j as f64)
    }

    fn nearest(&self, p: Vec2) -> (i64, i64) {
        let r3 = 3f64.sqrt() / 2.0;
        let d = (p - self.origin) / self.h;
        let jf = d.y / r3;
        let (j0, i0) = (jf.floor() as i64, (d.x - 0.5 * jf).floor() as i64);
        // Skewed coordinates do not round directly; check the cell's candidates.
        let mut best = (i0, j0);
        let mut best_d = f64::INFINITY;
        for dj in -1..=2 {
            for di in -1..=2 {
                let c = (i0 + di, j0 + dj);
                let dist = (self.point(c) - p).norm_squared();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
        }
        best
    }
}

/// Weighted blend of existing node warps and variances at `p`.
fn interpolate(nodes: &[Node], p: Vec2, alpha: f64) -> (WarpFunction, f64) {
    let d2: Vec<f64> = nodes.iter().map(|n| (n.anchor - p).norm_squared()).collect();
    let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let mut acc = BlendAccumulator::default();
    let (mut vsum, mut wsum) = (0.0, 0.0);
    for (n, d) in nodes.iter().zip(&d2) {
        // Relative weights; the nearest node always has weight one.
        let w = (-alpha * (d - dmin)).exp();
        acc.add_warp(w, &n.warp);
        vsum += w * n.variance;
        wsum += w;
    }
    (acc.finish().unwrap_or(WarpFunction::IDENTITY), vsum / wsum)
}

/// Grows the hexagonal lattice until every point of `region` is within
/// `hex_spacing / √3` of a node anchor. Returns the number of nodes added.
///
/// The first node of an empty graph is placed at the region's center with
/// the identity warp. Later nodes inherit a distance-weighted blend of the
/// warps and variances of the nodes that existed before the call.
pub fn insert_nodes(graph: &mut NodeGraph, region: &Region, alpha: f64) -> usize {
    let h = graph.hex_spacing;
    assert!(h > 0.0, "hex spacing must be positive");
    let Some(seed) = region.seed_point() else { return 0 };
    let before = graph.nodes.len();
    if graph.nodes.is_empty() {
        graph.nodes.push(Node::new(seed, WarpFunction::IDENTITY, 0.0));
    }
    let lattice = Lattice { origin: graph.nodes[0].anchor, h };
    let reach = h;
    let accept = h / 3f64.sqrt() * (1.0 + 1e-9);

    let mut occupied: Vec<(i64, i64)> = graph.nodes.iter().map(|n| lattice.nearest(n.anchor)).collect();
    occupied.sort_unstable();
    occupied.dedup();
    let mut visited: HashSet<(i64, i64)> = occupied.iter().copied().collect();
    let mut queue: VecDeque<(i64, i64)> = occupied.into_iter().collect();
    let mut fresh = Vec::new();

    let s = lattice.nearest(seed);
    if visited.insert(s) {
        queue.push_back(s);
        if region.distance(lattice.point(s)) <= accept {
            fresh.push(lattice.point(s));
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        for (di, dj) in Lattice::STEPS {
            let c = (i + di, j + dj);
            if !visited.insert(c) {
                continue;
            }
            let p = lattice.point(c);
            let d = region.distance(p);
            if d <= reach {
                queue.push_back(c);
                if d <= accept {
                    fresh.push(p);
                }
            }
        }
    }

    let existing = graph.nodes[..graph.nodes.len()].to_vec();
    let blended: Vec<Node> = fresh
        .iter()
        .map(|&p| {
            let (warp, var) = interpolate(&existing, p, alpha);
            Node::new(p, warp, var)
        })
        .collect();
    graph.nodes.extend(blended);
    graph.nodes.len() - before
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_anchor(g: &NodeGraph, p: Vec2) -> f64 {
        g.nodes.iter().map(|n| (n.anchor - p).norm()).fold(f64::INFINITY, f64::min)
    }

    fn max_gap(g: &NodeGraph, region: &Region) -> f64 {
        let (lo, hi) = region.bounds();
        let mut worst: f64 = 0.0;
        let mut y = lo.y;
        while y <= hi.y {
            let mut x = lo.x;
            while x <= hi.x {
                let p = Vec2::new(x, y);
                if region.contains(p) {
                    worst = worst.max(nearest_anchor(g, p));
                }
                x += 2.0;
            }
            y += 2.0;
        }
        worst
    }

    #[test]
    fn first_node_at_center_and_region_covered() {
        let mut g = NodeGraph::new(60.0);
        let r = Region::rect(480.0, 270.0);
        let added = insert_nodes(&mut g, &r, 2e-4);
        assert_eq!(g.nodes[0].anchor, Vec2::new(240.0, 135.0));
        assert_eq!(added, g.nodes.len());
        assert!(max_gap(&g, &r) <= 60.0 / 3f64.sqrt() + 1e-6);
        assert!(g.nodes.iter().all(|n| n.warp == WarpFunction::IDENTITY && n.variance == 0.0));
    }

    #[test]
    fn covered_region_adds_nothing() {
        let mut g = NodeGraph::new(60.0);
        let r = Region::rect(480.0, 270.0);
        insert_nodes(&mut g, &r, 2e-4);
        assert_eq!(insert_nodes(&mut g, &r, 2e-4), 0);
    }

    #[test]
    fn expansion_blends_neighbours() {
        let alpha = 2e-4;
        let mut g = NodeGraph::new(60.0);
        insert_nodes(&mut g, &Region::rect(480.0, 270.0), alpha);
        for (k, n) in g.nodes.iter_mut().enumerate() {
            n.set_warp(WarpFunction::from_params(1.0, 0.0, Vec2::new(k as f64 * 0.1, 0.0)));
            n.variance = k as f64;
        }
        let old = g.nodes.clone();
        let added = insert_nodes(&mut g, &Region::rect(540.0, 270.0), alpha);
        assert!(added > 0);
        for n in &g.nodes[old.len()..] {
            assert!(n.anchor.x > 480.0 - 60.0);
            // Oracle: explicit node-weighted average of translations.
            let (mut t, mut v, mut ws) = (Vec2::zeros(), 0.0, 0.0);
            for o in &old {
                let w = (-alpha * (o.anchor - n.anchor).norm_squared()).exp();
                t += w * o.warp.dq.translation();
                v += w * o.variance;
                ws += w;
            }
            assert!((n.warp.dq.translation() - t / ws).norm() < 1e-9);
            assert!((n.variance - v / ws).abs() < 1e-9 * (1.0 + v / ws));
        }
        assert!(max_gap(&g, &Region::rect(540.0, 270.0)) <= 60.0);
    }

    #[test]
    fn polygon_region() {
        let mut g = NodeGraph::new(40.0);
        insert_nodes(&mut g, &Region::rect(100.0, 100.0), 2e-4);
        let poly = Region::Polygon(vec![Vec2::new(50.0, 50.0), Vec2::new(400.0, 80.0), Vec2::new(380.0, 300.0), Vec2::new(60.0, 250.0)]);
        insert_nodes(&mut g, &poly, 2e-4);
        assert!(max_gap(&g, &poly) <= 40.0);
        assert!(
            (poly.area()
                - Region::Polygon(vec![Vec2::new(60.0, 250.0), Vec2::new(380.0, 300.0), Vec2::new(400.0, 80.0), Vec2::new(50.0, 50.0),])
                    .area())
            .abs()
                < 1e-9
        );
    }

    #[test]
    fn disjoint_region_is_seeded() {
        let mut g = NodeGraph::new(60.0);
        insert_nodes(&mut g, &Region::rect(100.0, 100.0), 2e-4);
        let far = Region::Rect { min: Vec2::new(1000.0, 1000.0), max: Vec2::new(1200.0, 1100.0) };
        insert_nodes(&mut g, &far, 2e-4);
        assert!(max_gap(&g, &far) <= 60.0);
    }
}
