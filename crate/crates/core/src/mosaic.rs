//! Dense warping of frames into a growing reference-frame canvas.
//!
//! Canvas pixels are pulled from the frame: each canvas pixel's reference
//! coordinate is mapped forward by the interpolated node warp and the frame
//! is sampled there. Node weights are separable in x and y, so per-column
//! factors are tabulated once per frame and node subsets are pruned per row
//! and per 32-pixel segment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dq2::{BlendAccumulator, WarpFunction};
use crate::raster::ColorImage;
use crate::slam::{Node, Region};
use crate::{Error, Result, Vec2};

/// Nodes with smaller weight do not contribute to a pixel.
pub const MIN_NODE_WEIGHT: f64 = 1e-6;
pub const DEFAULT_MAX_WEIGHT: u16 = 30;
const GROW_TILE: i64 = 256;
const SEGMENT: usize = 32;

#[inline]
fn axis_weight(alpha: f64, d: f64) -> f64 {
    (-alpha * (d * d)).exp()
}

/// Interpolated warp at reference coordinate `x_ref`.
pub fn pixel_warp(x_ref: Vec2, nodes: &[Node], alpha: f64) -> Result<WarpFunction> {
    let mut acc = BlendAccumulator::default();
    for n in nodes {
        let w = axis_weight(alpha, n.anchor.x - x_ref.x) * axis_weight(alpha, n.anchor.y - x_ref.y);
        if w > MIN_NODE_WEIGHT {
            acc.add_warp(w, &n.warp);
        }
    }
    acc.finish().ok_or(Error::NoSupport)
}

/// Like [`pixel_warp`] but with weights relative to the nearest node, so it
/// is defined everywhere. Used for geometry far from the nodes.
pub fn interpolated_warp(x_ref: Vec2, nodes: &[Node], alpha: f64) -> Option<WarpFunction> {
    let dmin = nodes.iter().map(|n| (n.anchor - x_ref).norm_squared()).fold(f64::INFINITY, f64::min);
    let mut acc = BlendAccumulator::default();
    for n in nodes {
        acc.add_warp((-alpha * ((n.anchor - x_ref).norm_squared() - dmin)).exp(), &n.warp);
    }
    acc.finish()
}

/// Reference coordinate that the interpolated warp maps to frame point `y`.
pub fn invert_point(y: Vec2, nodes: &[Node], alpha: f64) -> Option<Vec2> {
    let nearest = nodes.iter().min_by(|a, b| (a.position - y).norm_squared().total_cmp(&(b.position - y).norm_squared()))?;
    let mut x = nearest.warp.unapply(y).ok()?;
    for _ in 0..50 {
        let next = interpolated_warp(x, nodes, alpha)?.unapply(y).ok()?;
        let step = (next - x).norm();
        x = next;
        if step < 1e-6 {
            break;
        }
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Frame outline mapped back to reference coordinates.
pub fn frame_footprint(nodes: &[Node], alpha: f64, width: usize, height: usize) -> Option<Region> {
    if nodes.is_empty() || width == 0 || height == 0 {
        return None;
    }
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let step = 8.0;
    let mut outline = Vec::new();
    let edge = |a: Vec2, b: Vec2, out: &mut Vec<Vec2>| {
        let n = ((b - a).norm() / step).ceil().max(1.0) as usize;
        for k in 0..n {
            out.push(a + (b - a) * (k as f64 / n as f64));
        }
    };
    let corners = [Vec2::new(0.0, 0.0), Vec2::new(w, 0.0), Vec2::new(w, h), Vec2::new(0.0, h)];
    for k in 0..4 {
        edge(corners[k], corners[(k + 1) % 4], &mut outline);
    }
    let poly: Option<Vec<Vec2>> = outline.par_iter().map(|&y| invert_point(y, nodes, alpha)).collect();
    poly.map(Region::Polygon)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlendStats {
    pub footprint_area: f64,
    pub blended_pixels: usize,
    /// Pixels in the footprint's bounding box without node support.
    pub skipped_pixels: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
}

/// Growing mosaic with a capped running-average color per pixel.
#[derive(Clone, Debug)]
pub struct Canvas {
    /// Reference coordinate of canvas pixel (0, 0).
    pub origin: (i64, i64),
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f32; 3]>,
    pub weight: Vec<u16>,
    pub max_weight: u16,
}

impl Default for Canvas {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_WEIGHT)
    }
}

/// Rendered canvas and where it sits in reference coordinates.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: ColorImage,
    pub mask: Vec<bool>,
    pub origin: (i64, i64),
}

impl Canvas {
    pub fn new(max_weight: u16) -> Self {
        Self { origin: (0, 0), width: 0, height: 0, color: Vec::new(), weight: Vec::new(), max_weight }
    }

    pub fn is_occupied(&self, x: usize, y: usize) -> bool {
        self.weight[y * self.width + x] > 0
    }

    pub fn occupied_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0).count()
    }

    /// Color at an integer reference coordinate, if occupied.
    pub fn color_at(&self, x: i64, y: i64) -> Option<[f32; 3]> {
        let (cx, cy) = (x - self.origin.0, y - self.origin.1);
        if cx < 0 || cy < 0 || cx >= self.width as i64 || cy >= self.height as i64 {
            return None;
        }
        let i = cy as usize * self.width + cx as usize;
        (self.weight[i] > 0).then_some(self.color[i])
    }

    /// Enlarges the canvas in whole tiles so that it contains the integer
    /// reference range `[lo, hi]`. Existing pixels are copied unchanged.
    pub fn grow_to_include(&mut self, lo: (i64, i64), hi: (i64, i64)) {
        let snap_lo = |v: i64| v.div_euclid(GROW_TILE) * GROW_TILE;
        let snap_hi = |v: i64| (v.div_euclid(GROW_TILE) + 1) * GROW_TILE;
        let (mut x0, mut y0) = (snap_lo(lo.0), snap_lo(lo.1));
        let (mut x1, mut y1) = (snap_hi(hi.0), snap_hi(hi.1));
        if self.width > 0 {
            let (ox, oy) = self.origin;
            if lo.0 >= ox && lo.1 >= oy && hi.0 < ox + self.width as i64 && hi.1 < oy + self.height as i64 {
                return;
            }
            x0 = x0.min(ox);
            y0 = y0.min(oy);
            x1 = x1.max(ox + self.width as i64);
            y1 = y1.max(oy + self.height as i64);
        }
        let (nw, nh) = ((x1 - x0) as usize, (y1 - y0) as usize);
        let mut color = vec![[0.0; 3]; nw * nh];
        let mut weight = vec![0u16; nw * nh];
        let (dx, dy) = ((self.origin.0 - x0) as usize, (self.origin.1 - y0) as usize);
        for r in 0..self.height {
            let src = r * self.width;
            let dst = (r + dy) * nw + dx;
            color[dst..dst + self.width].copy_from_slice(&self.color[src..src + self.width]);
            weight[dst..dst + self.width].copy_from_slice(&self.weight[src..src + self.width]);
        }
        *self = Canvas { origin: (x0, y0), width: nw, height: nh, color, weight, max_weight: self.max_weight };
    }

    /// Warps `frame` into the canvas with the current node warps.
    pub fn blend_frame(&mut self, frame: &ColorImage, nodes: &[Node], alpha: f64) -> BlendStats {
        let Some(region) = frame_footprint(nodes, alpha, frame.width, frame.height) else {
            return BlendStats { canvas_width: self.width, canvas_height: self.height, ..Default::default() };
        };
        let (lo, hi) = region.bounds();
        let lo = (lo.x.floor() as i64 - 1, lo.y.floor() as i64 - 1);
        let hi = (hi.x.ceil() as i64 + 1, hi.y.ceil() as i64 + 1);
        self.grow_to_include(lo, hi);

        let (ox, oy) = self.origin;
        let cx0 = (lo.0 - ox) as usize;
        let cy0 = (lo.1 - oy) as usize;
        let cols = (hi.0 - lo.0 + 1) as usize;
        let rows = (hi.1 - lo.1 + 1) as usize;
        let n = nodes.len();

        // Column factors: ex[c * n + i] for canvas column cx0 + c.
        let ex: Vec<f64> = (0..cols)
            .into_par_iter()
            .flat_map_iter(|c| {
                let x = (ox + (cx0 + c) as i64) as f64;
                nodes.iter().map(move |nd| axis_weight(alpha, nd.anchor.x - x))
            })
            .collect();
        let segments = cols.div_ceil(SEGMENT);
        let seg_max: Vec<f64> = (0..segments)
            .into_par_iter()
            .flat_map_iter(|s| {
                let ex = &ex;
                let (c0, c1) = (s * SEGMENT, ((s + 1) * SEGMENT).min(cols));
                (0..n).map(move |i| (c0..c1).map(|c| ex[c * n + i]).fold(0.0, f64::max))
            })
            .collect();

        let width = self.width;
        let max_w = self.max_weight;
        let counts: Vec<(usize, usize)> = self
            .color
            .par_chunks_mut(width)
            .zip(self.weight.par_chunks_mut(width))
            .enumerate()
            .skip(cy0)
            .take(rows)
            .map(|(cy, (color_row, weight_row))| {
                let y = (oy + cy as i64) as f64;
                let ey: Vec<f64> = nodes.iter().map(|nd| axis_weight(alpha, nd.anchor.y - y)).collect();
                let row_nodes: Vec<usize> = (0..n).filter(|&i| ey[i] > MIN_NODE_WEIGHT).collect();
                let (mut blended, mut skipped) = (0, 0);
                let mut subset = Vec::with_capacity(row_nodes.len());
                for s in 0..segments {
                    subset.clear();
                    subset.extend(row_nodes.iter().copied().filter(|&i| seg_max[s * n + i] * ey[i] > MIN_NODE_WEIGHT));
                    for c in s * SEGMENT..((s + 1) * SEGMENT).min(cols) {
                        let mut acc = BlendAccumulator::default();
                        for &i in &subset {
                            let w = ex[c * n + i] * ey[i];
                            if w > MIN_NODE_WEIGHT {
                                acc.add_warp(w, &nodes[i].warp);
                            }
                        }
                        let Some(warp) = acc.finish() else {
                            skipped += 1;
                            continue;
                        };
                        let cx = cx0 + c;
                        let p = Vec2::new((ox + cx as i64) as f64, y);
                        let q = warp.apply(p);
                        let Some(rgb) = frame.sample(q.x, q.y) else { continue };
                        let w = weight_row[cx];
                        let px = &mut color_row[cx];
                        let k = 1.0 / (f32::from(w) + 1.0);
                        for ch in 0..3 {
                            px[ch] += (rgb[ch] - px[ch]) * k;
                        }
                        weight_row[cx] = (w + 1).min(max_w);
                        blended += 1;
                    }
                }
                (blended, skipped)
            })
            .collect();
        let (blended_pixels, skipped_pixels) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        BlendStats { footprint_area: region.area(), blended_pixels, skipped_pixels, canvas_width: self.width, canvas_height: self.height }
    }

    /// Colors with an occupancy mask. With `crop`, the output is the tight
    /// bounding box of occupied pixels (0×0 when nothing is occupied).
    pub fn render(&self, crop: bool) -> Rendered {
        let (mut x0, mut y0, mut x1, mut y1) = (0, 0, self.width, self.height);
        if crop {
            let (mut lx, mut ly, mut hx, mut hy) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..self.height {
                for x in 0..self.width {
                    if self.weight[y * self.width + x] > 0 {
                        lx = lx.min(x);
                        ly = ly.min(y);
                        hx = hx.max(x + 1);
                        hy = hy.max(y + 1);
                    }
                }
            }
            if lx == usize::MAX {
                (x0, y0, x1, y1) = (0, 0, 0, 0);
            } else {
                (x0, y0, x1, y1) = (lx, ly, hx, hy);
            }
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut image = ColorImage::new(w, h);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = (y + y0) * self.width + x + x0;
                if self.weight[i] > 0 {
                    image.data[y * w + x] = self.color[i];
                    mask[y * w + x] = true;
                }
            }
        }
        Rendered { image, mask, origin: (self.origin.0 + x0 as i64, self.origin.1 + y0 as i64) }
    }
}
