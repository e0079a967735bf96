//! Feature matches between frames.
//!
//! The built-in detector is a single-scale Harris corner detector with
//! grid bucketing (so that corners spread over the whole frame, including
//! weakly textured areas) and sub-pixel refinement. Each corner is described
//! by an upright, mean-free, unit-norm 8×8 intensity patch sampled from a
//! smoothed image; descriptors are matched by nearest neighbour with a
//! distance-ratio test and an optional mutual check.
//!
//! Matches can also be read from plain text files so that any external
//! detector can drive the pipeline:
//!
//! ```text
//! # ax ay bx by score
//! 12.5 40.25 14.0 41.0 0.93
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::GrayImage;
use crate::{Error, Result, Vec2};

pub const DESCRIPTOR_LEN: usize = 64;
const PATCH_GRID: usize = 8;
const PATCH_STEP: f64 = 2.0;

pub type Descriptor = [f32; DESCRIPTOR_LEN];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Vec2,
    pub response: f32,
}

/// A candidate correspondence; `score` is descriptor similarity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub point_a: Vec2,
    pub point_b: Vec2,
    pub score: f64,
}

impl MatchPair {
    pub fn new(point_a: Vec2, point_b: Vec2, score: f64) -> Self {
        Self { point_a, point_b, score }
    }
}

/// Keypoints and descriptors of one frame.
#[derive(Clone, Debug, Default)]
pub struct FrameFeatures {
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FrameFeatures {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Harris sensitivity `k` in `det − k·trace²`.
    pub harris_k: f64,
    /// Pre-smoothing before gradients.
    pub pre_sigma: f64,
    /// Integration scale of the structure tensor.
    pub tensor_sigma: f64,
    /// Smoothing of the image descriptors are sampled from.
    pub descriptor_sigma: f64,
    /// Side of the bucketing cells, pixels.
    pub cell_size: usize,
    pub per_cell: usize,
    pub max_features: usize,
    /// Response threshold relative to the strongest corner.
    pub relative_threshold: f64,
    pub absolute_threshold: f64,
    /// Nearest / second-nearest descriptor distance ratio.
    pub ratio: f64,
    pub mutual: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            harris_k: 0.04,
            pre_sigma: 1.0,
            tensor_sigma: 1.5,
            descriptor_sigma: 1.5,
            cell_size: 20,
            per_cell: 2,
            max_features: 800,
            relative_threshold: 1e-3,
            absolute_threshold: 1e-10,
            ratio: 0.8,
            mutual: true,
        }
    }
}

impl DetectorConfig {
    /// Pixel-unit settings multiplied by the resolution scale `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { cell_size: ((self.cell_size as f64 * s).round() as usize).max(4), ..self.clone() }
    }

    fn border(&self) -> usize {
        let half_patch = (PATCH_GRID as f64 - 1.0) * 0.5 * PATCH_STEP;
        (half_patch + 3.0 * self.tensor_sigma).ceil() as usize + 1
    }
}

/// Separable Gaussian blur with clamped borders.
pub(crate) fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 || img.is_empty() {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = vec![0.0f32; img.data.len()];
    tmp.par_chunks_mut(img.width).enumerate().for_each(|(y, row)| {
        let src = &img.data[y * img.width..(y + 1) * img.width];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w - 1) as usize;
                acc += kv * src[xx];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0f32; img.data.len()];
    out.par_chunks_mut(img.width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h - 1) as usize;
                acc += kv * tmp[yy * img.width + x];
            }
            *o = acc;
        }
    });
    GrayImage { width: img.width, height: img.height, data: out }
}

fn harris_response(img: &GrayImage, cfg: &DetectorConfig) -> GrayImage {
    let s = gaussian_blur(img, cfg.pre_sigma);
    let (w, h) = (img.width, img.height);
    let mut ixx = GrayImage::new(w, h);
    let mut iyy = GrayImage::new(w, h);
    let mut ixy = GrayImage::new(w, h);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = 0.5 * (s.get(x + 1, y) - s.get(x - 1, y));
            let gy = 0.5 * (s.get(x, y + 1) - s.get(x, y - 1));
            let i = y * w + x;
            ixx.data[i] = gx * gx;
            iyy.data[i] = gy * gy;
            ixy.data[i] = gx * gy;
        }
    }
    let (a, b, c) = (gaussian_blur(&ixx, cfg.tensor_sigma), gaussian_blur(&iyy, cfg.tensor_sigma), gaussian_blur(&ixy, cfg.tensor_sigma));
    let k = cfg.harris_k as f32;
    GrayImage {
        width: w,
        height: h,
        data: (0..w * h)
            .map(|i| {
                let tr = a.data[i] + b.data[i];
                a.data[i] * b.data[i] - c.data[i] * c.data[i] - k * tr * tr
            })
            .collect(),
    }
}

/// Detects corners and computes their descriptors.
pub fn detect(img: &GrayImage, cfg: &DetectorConfig) -> FrameFeatures {
    let mut out = FrameFeatures { width: img.width, height: img.height, ..Default::default() };
    let border = cfg.border();
    if img.width <= 2 * border + 2 || img.height <= 2 * border + 2 {
        return out;
    }
    let resp = harris_response(img, cfg);
    let (w, h) = (img.width, img.height);
    let max_r = resp.data.iter().cloned().fold(0.0f32, f32::max) as f64;
    let thresh = (max_r * cfg.relative_threshold).max(cfg.absolute_threshold) as f32;

    let cell = cfg.cell_size.max(1);
    let (cols, rows) = (w.div_ceil(cell), h.div_ceil(cell));
    let mut buckets: Vec<Vec<(f32, usize, usize)>> = vec![Vec::new(); cols * rows];
    for y in border..h - border {
        for x in border..w - border {
            let v = resp.get(x, y);
            if v <= thresh {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = resp.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                    // Ties broken towards the earlier pixel in scan order.
                    if n > v || (n == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                buckets[(y / cell) * cols + x / cell].push((v, x, y));
            }
        }
    }
    let mut picked: Vec<(f32, usize, usize)> = Vec::new();
    for b in &mut buckets {
        b.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.2, p.1).cmp(&(q.2, q.1))));
        picked.extend(b.iter().take(cfg.per_cell));
    }
    if picked.len() > cfg.max_features {
        picked.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.2, p.1).cmp(&(q.2, q.1))));
        picked.truncate(cfg.max_features);
    }

    let smooth = gaussian_blur(img, cfg.descriptor_sigma);
    for (v, x, y) in picked {
        let pos = refine_subpixel(&resp, x, y);
        if let Some(d) = describe(&smooth, pos) {
            out.keypoints.push(Keypoint { position: pos, response: v });
            out.descriptors.push(d);
        }
    }
    out
}

/// Separable parabolic peak fit on the response surface.
fn refine_subpixel(resp: &GrayImage, x: usize, y: usize) -> Vec2 {
    let fit = |m: f32, c: f32, p: f32| -> f64 {
        let denom = m - 2.0 * c + p;
        if denom >= 0.0 {
            return 0.0;
        }
        (0.5 * (m - p) / denom).clamp(-0.5, 0.5) as f64
    };
    let c = resp.get(x, y);
    let dx = fit(resp.get(x - 1, y), c, resp.get(x + 1, y));
    let dy = fit(resp.get(x, y - 1), c, resp.get(x, y + 1));
    Vec2::new(x as f64 + dx, y as f64 + dy)
}

fn describe(img: &GrayImage, pos: Vec2) -> Option<Descriptor> {
    let mut d = [0.0f32; DESCRIPTOR_LEN];
    let half = (PATCH_GRID as f64 - 1.0) * 0.5 * PATCH_STEP;
    for gy in 0..PATCH_GRID {
        for gx in 0..PATCH_GRID {
            let sx = pos.x - half + gx as f64 * PATCH_STEP;
            let sy = pos.y - half + gy as f64 * PATCH_STEP;
            d[gy * PATCH_GRID + gx] = img.sample(sx, sy)?;
        }
    }
    let mean = d.iter().sum::<f32>() / DESCRIPTOR_LEN as f32;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

#[inline]
fn dist_sq(a: &Descriptor, b: &Descriptor) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best and second-best squared distances from `d` into `set`.
fn nearest_two(d: &Descriptor, set: &[Descriptor]) -> Option<(usize, f32, f32)> {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (j, e) in set.iter().enumerate() {
        let v = dist_sq(d, e);
        if v < best.1 {
            second = best.1;
            best = (j, v);
        } else if v < second {
            second = v;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Matches two feature sets; result order follows the keypoints of `a`.
pub fn match_features(a: &FrameFeatures, b: &FrameFeatures, cfg: &DetectorConfig) -> Vec<MatchPair> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let forward: Vec<Option<(usize, f32, f32)>> = a.descriptors.par_iter().map(|d| nearest_two(d, &b.descriptors)).collect();
    let backward: Option<Vec<usize>> =
        cfg.mutual.then(|| b.descriptors.par_iter().map(|d| nearest_two(d, &a.descriptors).map_or(usize::MAX, |n| n.0)).collect());
    let ratio_sq = (cfg.ratio * cfg.ratio) as f32;
    let mut out = Vec::new();
    for (i, m) in forward.iter().enumerate() {
        let Some((j, d1, d2)) = *m else { continue };
        if !(d1 < ratio_sq * d2) {
            continue;
        }
        if let Some(back) = &backward {
            if back[j] != i {
                continue;
            }
        }
        let score = (1.0 - d1 as f64 / 4.0).clamp(0.0, 1.0);
        out.push(MatchPair::new(a.keypoints[i].position, b.keypoints[j].position, score));
    }
    out
}

/// Detects in both images and matches them.
pub fn detect_and_match(a: &GrayImage, b: &GrayImage, cfg: &DetectorConfig) -> Result<Vec<MatchPair>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Format("empty image".into()));
    }
    if a.data.len() != a.width * a.height || b.data.len() != b.width * b.height {
        return Err(Error::Format("raster buffer does not match its dimensions".into()));
    }
    let (fa, fb) = rayon::join(|| detect(a, cfg), || detect(b, cfg));
    Ok(match_features(&fa, &fb, cfg))
}

pub fn format_matches(matches: &[MatchPair]) -> String {
    let mut s = String::from("# ax ay bx by score\n");
    for m in matches {
        // `{}` prints the shortest representation that parses back exactly.
        let _ = writeln!(s, "{} {} {} {} {}", m.point_a.x, m.point_a.y, m.point_b.x, m.point_b.y, m.score);
    }
    s
}

pub fn parse_matches(text: &str, origin: &str) -> Result<Vec<MatchPair>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.to_string(), line: idx + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields (ax ay bx by score), found {}", fields.len())));
        }
        let mut v = [0.0f64; 5];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| err(format!("not a number: `{f}`")))?;
        }
        out.push(MatchPair::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3]), v[4]));
    }
    Ok(out)
}

pub fn save_matches(path: &Path, matches: &[MatchPair]) -> Result<()> {
    std::fs::write(path, format_matches(matches))?;
    Ok(())
}

pub fn load_matches(path: &Path) -> Result<Vec<MatchPair>> {
    let text = std::fs::read_to_string(path)?;
    parse_matches(&text, &path.display().to_string())
}
