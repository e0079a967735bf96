//! Synthetic deforming scans with ground truth.
//!
//! A procedural texture defines the world. At time `t` a world point `X` is
//! displaced by a sum of Gaussian bumps with sinusoidal amplitudes,
//! `D(X, t) = X + Σ a_k(t)·d_k·exp(−‖X − c_k‖²/2σ_k²)`, and then imaged by
//! a similarity camera. Frames are rendered backwards: each pixel is mapped
//! to the deformed world, `D` is inverted by fixed-point iteration and the
//! texture is sampled bilinearly.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dq2::rotation_matrix;
use crate::mosaic::Canvas;
use crate::raster::ColorImage;
use crate::{Error, Result, Vec2};

/// Upper bound on the deformation's Lipschitz constant; keeps `D(·, t)`
/// invertible by fixed-point iteration.
pub const MAX_LIPSCHITZ: f64 = 0.5;
pub const CORRESPONDENCE_MAGIC: [u8; 8] = *b"NRMCORR1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    /// Unit displacement direction.
    pub direction: [f64; 2],
    pub sigma: f64,
    /// Peak displacement, px.
    pub amplitude: f64,
    /// Oscillation period, frames.
    pub period: f64,
    pub phase: f64,
}

impl Bump {
    #[inline]
    fn displacement(&self, x: Vec2, t: f64) -> Vec2 {
        let d2 = (x.x - self.center[0]).powi(2) + (x.y - self.center[1]).powi(2);
        let e = d2 / (2.0 * self.sigma * self.sigma);
        if e > 20.0 {
            return Vec2::zeros();
        }
        let a = self.amplitude * (std::f64::consts::TAU * t / self.period + self.phase).sin();
        Vec2::new(self.direction[0], self.direction[1]) * (a * (-e).exp())
    }

    /// Worst-case (over time) gradient norm of the bump at `x`.
    fn gradient_bound(&self, x: Vec2) -> f64 {
        let r = ((x.x - self.center[0]).powi(2) + (x.y - self.center[1]).powi(2)).sqrt();
        let s2 = self.sigma * self.sigma;
        self.amplitude.abs() * r / s2 * (-r * r / (2.0 * s2)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Static,
    /// Straight pan by `path_extent` over the whole sequence.
    Translate,
    /// Pan out by `path_extent` and back to the start.
    OutAndBack,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: f64,
    /// World point at the image center.
    pub center: [f64; 2],
    pub angle: f64,
    pub zoom: f64,
}

/// Scene description; TOML on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub path: PathKind,
    /// Camera travel in world px.
    pub path_extent: [f64; 2],
    /// Camera roll accumulated along the path, radians.
    pub path_rotation: f64,
    /// Zoom reached at the far end of the path.
    pub path_zoom: f64,
    /// Explicit camera waypoints; override `path` when non-empty.
    pub waypoints: Vec<Waypoint>,
    /// Random bump count is drawn from this inclusive range.
    pub bump_count: [usize; 2],
    pub max_displacement: f64,
    pub sigma_range: [f64; 2],
    pub period_range: [f64; 2],
    /// Explicit bumps; override the random draw when non-empty.
    pub bumps: Vec<Bump>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 480,
            height: 270,
            frames: 200,
            path: PathKind::Translate,
            path_extent: [300.0, 60.0],
            path_rotation: 0.1,
            path_zoom: 1.05,
            waypoints: Vec::new(),
            bump_count: [4, 8],
            max_displacement: 15.0,
            sigma_range: [140.0, 240.0],
            period_range: [50.0, 110.0],
            bumps: Vec::new(),
            noise: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::config::toml_error(text, &e))
    }

    /// Applies a `dotted.key=value` override, value in TOML syntax.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        *self = crate::config::with_override(self, assignment)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    fn waypoints(&self) -> Vec<Waypoint> {
        if !self.waypoints.is_empty() {
            return self.waypoints.clone();
        }
        let last = self.frames.saturating_sub(1).max(1) as f64;
        let start = Waypoint { frame: 0.0, center: [0.0, 0.0], angle: 0.0, zoom: 1.0 };
        let far = |frame: f64| Waypoint { frame, center: self.path_extent, angle: self.path_rotation, zoom: self.path_zoom };
        match self.path {
            PathKind::Static => vec![start],
            PathKind::Translate => vec![start, far(last)],
            PathKind::OutAndBack => vec![start, far(last / 2.0), Waypoint { frame: last, ..start }],
        }
    }
}

/// World-to-image similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub center: Vec2,
    pub angle: f64,
    pub zoom: f64,
    pub image_center: Vec2,
}

impl Camera {
    pub fn project(&self, y: Vec2) -> Vec2 {
        self.zoom * (rotation_matrix(self.angle) * (y - self.center)) + self.image_center
    }

    pub fn unproject(&self, u: Vec2) -> Vec2 {
        rotation_matrix(-self.angle) * (u - self.image_center) / self.zoom + self.center
    }
}

/// Dense frame-pixel → world-coordinate map.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 2]>,
}

impl CorrespondenceMap {
    pub fn get(&self, x: usize, y: usize) -> Vec2 {
        let v = self.data[y * self.width + x];
        Vec2::new(v[0] as f64, v[1] as f64)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CORRESPONDENCE_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v[0].to_le_bytes());
            buf.extend_from_slice(&v[1].to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..8] != CORRESPONDENCE_MAGIC {
            return Err(Error::Format("not a correspondence map".into()));
        }
        let width = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
        let mut buf = vec![0u8; width * height * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| [f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")), f32::from_le_bytes(c[4..8].try_into().expect("4 bytes"))])
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(octave ^ splitmix(ix as u64 ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, octave: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (u, v) = (fade(x - fx), fade(y - fy));
    let a = lattice_value(seed, octave, ix, iy);
    let b = lattice_value(seed, octave, ix + 1, iy);
    let c = lattice_value(seed, octave, ix, iy + 1);
    let d = lattice_value(seed, octave, ix + 1, iy + 1);
    let top = a + (b - a) * u;
    let bot = c + (d - c) * u;
    top + (bot - top) * v
}

/// Multi-scale colored value noise with soft-edged blobs.
fn procedural_texture(seed: u64, width: usize, height: usize, origin: Vec2) -> ColorImage {
    const OCTAVES: [(f64, f64); 6] = [(96.0, 0.30), (40.0, 0.24), (18.0, 0.18), (9.0, 0.12), (5.0, 0.09), (3.0, 0.07)];
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7E57));
    let area = (width * height) as f64;
    let blobs: Vec<(Vec2, f64, [f64; 3])> = (0..(area / 3000.0) as usize)
        .map(|_| {
            let c = Vec2::new(rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64)) + origin;
            let r = rng.random_range(4.0..18.0);
            let tint = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
            (c, r, tint)
        })
        .collect();
    let mut img = ColorImage::new(width, height);
    img.data.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let p = Vec2::new(x as f64, y as f64) + origin;
            let mut ch = [0.0f64; 3];
            for (k, c) in ch.iter_mut().enumerate() {
                *c = OCTAVES
                    .iter()
                    .enumerate()
                    .map(|(o, &(scale, amp))| amp * value_noise(seed.wrapping_add(k as u64 * 7919), o as u64, p.x / scale, p.y / scale))
                    .sum::<f64>();
                // Sums of noise octaves bunch up around the mean; spread them back out.
                *c = (0.5 + 2.2 * (*c - 0.5)).clamp(0.0, 1.0);
            }
            // Tissue-like palette: mostly red, correlated green/blue.
            let mut rgb = [0.35 + 0.6 * ch[0], 0.15 + 0.45 * (0.6 * ch[1] + 0.4 * ch[0]), 0.15 + 0.4 * ch[2]];
            for (c, r, tint) in &blobs {
                let d = (p - c).norm();
                let edge = ((r - d) / 1.5).clamp(0.0, 1.0);
                let s = edge * edge * (3.0 - 2.0 * edge);
                for k in 0..3 {
                    rgb[k] += s * tint[k];
                }
            }
            *px = rgb.map(|v| v.clamp(0.0, 1.0) as f32);
        }
    });
    img
}

/// A ready-to-render synthetic scene.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub bumps: Vec<Bump>,
    waypoints: Vec<Waypoint>,
    /// World coordinate of texture pixel (0, 0).
    pub texture_origin: Vec2,
    pub texture: ColorImage,
}

impl SyntheticScene {
    pub fn new(config: SceneConfig) -> Result<Self> {
        if config.width < 8 || config.height < 8 || config.frames == 0 {
            return Err(Error::Scene("resolution must be at least 8×8 with one frame".into()));
        }
        let waypoints = config.waypoints();
        if waypoints.iter().any(|w| !(w.zoom > 0.0)) {
            return Err(Error::Scene("camera zoom must be positive".into()));
        }
        // World bounds seen by any camera pose, plus a margin for deformation.
        let (w, h) = (config.width as f64, config.height as f64);
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        let samples = (config.frames.max(2) * 4).max(16);
        for s in 0..samples {
            let t = s as f64 * (config.frames.saturating_sub(1)) as f64 / (samples - 1) as f64;
            let cam = camera_at(&waypoints, t, w, h);
            for u in [Vec2::zeros(), Vec2::new(w, 0.0), Vec2::new(0.0, h), Vec2::new(w, h)] {
                let p = cam.unproject(u);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        let margin = 2.0 * config.max_displacement + 48.0;
        let texture_origin = (lo - Vec2::repeat(margin)).map(f64::floor);
        let extent = hi + Vec2::repeat(margin) - texture_origin;

        let bumps = if config.bumps.is_empty() {
            // Redraw until the bound holds; the draw sequence is seeded, so
            // the accepted set is deterministic.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut attempt = 0;
            loop {
                let mut bumps = draw_bumps(&config, &mut rng, lo, hi);
                // Overlapping bumps add up; rescale so the largest displacement
                // anywhere in view is `max_displacement`. The horizon does not
                // depend on the frame count, so longer renders of a seed share
                // their bumps with shorter ones.
                let horizon = bumps.iter().map(|b| b.period).fold(0.0, f64::max) * 2.0;
                let peak = peak_displacement(&bumps, lo, hi, horizon.ceil() as usize);
                let largest = bumps.iter().map(|b| b.amplitude.abs()).fold(0.0, f64::max);
                if peak > 0.0 && largest > 0.0 {
                    let k = (config.max_displacement / peak).min(config.max_displacement / largest);
                    bumps.iter_mut().for_each(|b| b.amplitude *= k);
                }
                if lipschitz_bound(&bumps, lo, hi) < MAX_LIPSCHITZ {
                    break bumps;
                }
                attempt += 1;
                if attempt == 100 {
                    return Err(Error::Scene("could not draw a deformation within the gradient bound".into()));
                }
            }
        } else {
            config.bumps.clone()
        };
        if bumps.iter().any(|b| !(b.sigma > 0.0) || !(b.period > 0.0) || b.amplitude.abs() > config.max_displacement.max(0.0) + 1e-12) {
            return Err(Error::Scene("bumps need positive sigma/period and |amplitude| ≤ max_displacement".into()));
        }
        let lipschitz = lipschitz_bound(&bumps, lo, hi);
        if lipschitz >= MAX_LIPSCHITZ {
            return Err(Error::Scene(format!(
                "deformation gradient bound {lipschitz:.3} ≥ {MAX_LIPSCHITZ}; reduce amplitude or widen bumps"
            )));
        }
        let texture = procedural_texture(config.seed, extent.x.ceil() as usize + 1, extent.y.ceil() as usize + 1, texture_origin);
        Ok(Self { config, bumps, waypoints, texture_origin, texture })
    }

    pub fn frame_count(&self) -> usize {
        self.config.frames
    }

    pub fn camera(&self, t: usize) -> Camera {
        camera_at(&self.waypoints, t as f64, self.config.width as f64, self.config.height as f64)
    }

    pub fn displacement(&self, x: Vec2, t: usize) -> Vec2 {
        self.bumps.iter().map(|b| b.displacement(x, t as f64)).sum()
    }

    /// Deformed position of world point `x` at time `t`.
    pub fn deform(&self, x: Vec2, t: usize) -> Vec2 {
        x + self.displacement(x, t)
    }

    /// Solves `deform(x, t) = y`, starting from `guess`.
    pub fn undeform(&self, y: Vec2, t: usize, guess: Vec2) -> Vec2 {
        let mut x = guess;
        for _ in 0..60 {
            let next = y - self.displacement(x, t);
            let step = (next - x).norm_squared();
            x = next;
            if step < 1e-16 {
                break;
            }
        }
        x
    }

    /// Image position of world point `x` in frame `t`.
    pub fn project(&self, x: Vec2, t: usize) -> Vec2 {
        self.camera(t).project(self.deform(x, t))
    }

    /// World point imaged at pixel `u` of frame `t`.
    pub fn world_of_pixel(&self, u: Vec2, t: usize) -> Vec2 {
        let y = self.camera(t).unproject(u);
        self.undeform(y, t, y)
    }

    /// Ground-truth frame-`t` position of a reference-frame point.
    pub fn true_position(&self, x_ref: Vec2, t: usize) -> Vec2 {
        self.project(self.world_of_pixel(x_ref, 0), t)
    }

    pub fn texture_color(&self, x: Vec2) -> Option<[f32; 3]> {
        let p = x - self.texture_origin;
        self.texture.sample(p.x, p.y)
    }

    /// Renders frame `t` and its correspondence map.
    pub fn render(&self, t: usize) -> (ColorImage, CorrespondenceMap) {
        let (w, h) = (self.config.width, self.config.height);
        let cam = self.camera(t);
        // Exact inversion on a coarse grid seeds the per-pixel iteration.
        const STEP: usize = 8;
        let (gw, gh) = (w.div_ceil(STEP) + 1, h.div_ceil(STEP) + 1);
        let grid: Vec<Vec2> = (0..gw * gh)
            .into_par_iter()
            .map(|k| {
                let u = Vec2::new(((k % gw) * STEP) as f64, ((k / gw) * STEP) as f64);
                let y = cam.unproject(u);
                self.undeform(y, t, y)
            })
            .collect();
        #[allow(clippy::type_complexity)]
        let rows: Vec<(Vec<[f32; 3]>, Vec<[f32; 2]>)> = (0..h)
            .into_par_iter()
            .map(|py| {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.config.seed ^ splitmix((t * 65_536 + py) as u64)));
                let mut colors = Vec::with_capacity(w);
                let mut world = Vec::with_capacity(w);
                let (gy, fy) = (py / STEP, (py % STEP) as f64 / STEP as f64);
                for px in 0..w {
                    let (gx, fx) = (px / STEP, (px % STEP) as f64 / STEP as f64);
                    let g = |i: usize, j: usize| grid[j * gw + i];
                    let guess = (g(gx, gy) * (1.0 - fx) + g(gx + 1, gy) * fx) * (1.0 - fy)
                        + (g(gx, gy + 1) * (1.0 - fx) + g(gx + 1, gy + 1) * fx) * fy;
                    let x = self.undeform(cam.unproject(Vec2::new(px as f64, py as f64)), t, guess);
                    let mut c = self.texture_color(x).unwrap_or([0.0; 3]);
                    if self.config.noise > 0.0 {
                        for v in &mut c {
                            let n: f64 = rng.sample(rand_distr_normal());
                            *v = (*v as f64 + self.config.noise * n).clamp(0.0, 1.0) as f32;
                        }
                    }
                    colors.push(c);
                    world.push([x.x as f32, x.y as f32]);
                }
                (colors, world)
            })
            .collect();
        let mut img = ColorImage::new(w, h);
        let mut map = CorrespondenceMap { width: w, height: h, data: Vec::with_capacity(w * h) };
        img.data.clear();
        for (c, m) in rows {
            img.data.extend(c);
            map.data.extend(m);
        }
        (img, map)
    }
}

/// Standard normal via Box–Muller on the crate RNG.
fn rand_distr_normal() -> impl rand::distr::Distribution<f64> {
    struct Normal;
    impl rand::distr::Distribution<f64> for Normal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }
    Normal
}

fn draw_bumps(config: &SceneConfig, rng: &mut ChaCha8Rng, lo: Vec2, hi: Vec2) -> Vec<Bump> {
    let n = rng.random_range(config.bump_count[0]..=config.bump_count[1].max(config.bump_count[0]));
    (0..n)
        .map(|_| {
            let c = lo + Vec2::new(rng.random_range(0.0..1.0) * (hi.x - lo.x), rng.random_range(0.0..1.0) * (hi.y - lo.y));
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Bump {
                center: [c.x, c.y],
                direction: [dir.cos(), dir.sin()],
                sigma: rng.random_range(config.sigma_range[0]..=config.sigma_range[1]),
                amplitude: config.max_displacement * rng.random_range(0.6..=1.0),
                period: rng.random_range(config.period_range[0]..=config.period_range[1]),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

/// Largest displacement magnitude on an 8 px grid over `[lo, hi]` and frames `0..frames`.
fn peak_displacement(bumps: &[Bump], lo: Vec2, hi: Vec2, frames: usize) -> f64 {
    const STEP: f64 = 8.0;
    let (nx, ny) = (((hi.x - lo.x) / STEP).ceil() as usize + 1, ((hi.y - lo.y) / STEP).ceil() as usize + 1);
    (0..frames.max(1))
        .into_par_iter()
        .map(|t| {
            let mut peak = 0.0f64;
            for iy in 0..ny {
                for ix in 0..nx {
                    let x = lo + Vec2::new(ix as f64 * STEP, iy as f64 * STEP);
                    let d: Vec2 = bumps.iter().map(|b| b.displacement(x, t as f64)).sum();
                    peak = peak.max(d.norm());
                }
            }
            peak
        })
        .reduce(|| 0.0, f64::max)
}

fn camera_at(waypoints: &[Waypoint], t: f64, w: f64, h: f64) -> Camera {
    let image_center = Vec2::new(w / 2.0, h / 2.0);
    let base = Vec2::new(w / 2.0, h / 2.0);
    let make =
        |wp: &Waypoint| Camera { center: base + Vec2::new(wp.center[0], wp.center[1]), angle: wp.angle, zoom: wp.zoom, image_center };
    let Some(first) = waypoints.first() else {
        return Camera { center: base, angle: 0.0, zoom: 1.0, image_center };
    };
    if t <= first.frame {
        return make(first);
    }
    for pair in waypoints.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if t <= b.frame {
            let s = if b.frame > a.frame { (t - a.frame) / (b.frame - a.frame) } else { 1.0 };
            let lerp = |x: f64, y: f64| x + (y - x) * s;
            return Camera {
                center: base + Vec2::new(lerp(a.center[0], b.center[0]), lerp(a.center[1], b.center[1])),
                angle: lerp(a.angle, b.angle),
                zoom: lerp(a.zoom, b.zoom),
                image_center,
            };
        }
    }
    make(waypoints.last().expect("non-empty"))
}

/// Maximum over a grid of `Σ_k |a_k|·‖∇g_k‖`, an upper bound on the
/// deformation's Jacobian norm at any time.
fn lipschitz_bound(bumps: &[Bump], lo: Vec2, hi: Vec2) -> f64 {
    let mut worst: f64 = 0.0;
    let (lo, hi) = (lo - Vec2::repeat(200.0), hi + Vec2::repeat(200.0));
    let step = 4.0;
    let mut y = lo.y;
    while y <= hi.y {
        let mut x = lo.x;
        while x <= hi.x {
            let p = Vec2::new(x, y);
            worst = worst.max(bumps.iter().map(|b| b.gradient_bound(p)).sum());
            x += step;
        }
        y += step;
    }
    worst
}

/// Estimated node positions of one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameNodes {
    pub frame: usize,
    pub anchors: Vec<Vec2>,
    pub positions: Vec<Vec2>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub node_rmse: f64,
    pub mosaic_rmse: f64,
    pub inlier_precision: Option<f64>,
    pub inlier_recall: Option<f64>,
    /// Mean node error on the last evaluated frame.
    pub drift: f64,
    pub node_samples: usize,
    pub mosaic_pixels: usize,
}

impl SyntheticScene {
    fn in_view(&self, x: Vec2) -> bool {
        let (w, h) = ((self.config.width - 1) as f64, (self.config.height - 1) as f64);
        x.x >= 0.0 && x.y >= 0.0 && x.x <= w && x.y <= h
    }
}

/// World point each node is scored against. Nodes anchored inside the
/// reference frame follow their anchor; the anchors of the others are
/// extrapolated, so they follow the point they sat on when first in view.
fn node_references(scene: &SyntheticScene, trajectory: &[FrameNodes]) -> Vec<Option<(usize, Vec2)>> {
    let mut refs: Vec<Option<(usize, Vec2)>> = Vec::new();
    for f in trajectory {
        if refs.len() < f.anchors.len() {
            refs.resize(f.anchors.len(), None);
        }
        for (i, (a, x)) in f.anchors.iter().zip(&f.positions).enumerate() {
            if refs[i].is_some() {
                continue;
            }
            if scene.in_view(*a) {
                refs[i] = Some((0, scene.world_of_pixel(*a, 0)));
            } else if scene.in_view(*x) {
                refs[i] = Some((f.frame, scene.world_of_pixel(*x, f.frame)));
            }
        }
    }
    refs
}

/// Node errors of one frame over the nodes whose true position is in view.
fn frame_errors(scene: &SyntheticScene, refs: &[Option<(usize, Vec2)>], f: &FrameNodes) -> Vec<f64> {
    f.positions
        .par_iter()
        .zip(refs)
        .filter_map(|(x, r)| {
            let (since, world) = (*r)?;
            if f.frame < since {
                return None;
            }
            let truth = scene.project(world, f.frame);
            scene.in_view(truth).then(|| (x - truth).norm())
        })
        .collect()
}

/// Scores node trajectories and an optional mosaic against ground truth.
pub fn evaluate(scene: &SyntheticScene, trajectory: &[FrameNodes], canvas: Option<&Canvas>) -> EvalReport {
    let mut report = EvalReport::default();
    let refs = node_references(scene, trajectory);
    let mut sq = 0.0;
    let mut last = Vec::new();
    for f in trajectory {
        last = frame_errors(scene, &refs, f);
        sq += last.iter().map(|e| e * e).sum::<f64>();
        report.node_samples += last.len();
    }
    if report.node_samples > 0 {
        report.node_rmse = (sq / report.node_samples as f64).sqrt();
    }
    if !last.is_empty() {
        report.drift = last.iter().sum::<f64>() / last.len() as f64;
    }
    if let Some(canvas) = canvas {
        let (rmse, n) = mosaic_rmse(scene, canvas);
        report.mosaic_rmse = rmse;
        report.mosaic_pixels = n;
    }
    report
}

/// Per-channel RMS color error over occupied canvas pixels.
pub fn mosaic_rmse(scene: &SyntheticScene, canvas: &Canvas) -> (f64, usize) {
    let (ox, oy) = canvas.origin;
    let per_row: Vec<(f64, usize)> = (0..canvas.height)
        .into_par_iter()
        .map(|cy| {
            let (mut s, mut n) = (0.0, 0);
            let mut guess: Option<Vec2> = None;
            for cx in 0..canvas.width {
                let i = cy * canvas.width + cx;
                if canvas.weight[i] == 0 {
                    continue;
                }
                let p = Vec2::new((ox + cx as i64) as f64, (oy + cy as i64) as f64);
                let cam = scene.camera(0);
                let y = cam.unproject(p);
                let x = scene.undeform(y, 0, guess.unwrap_or(y));
                guess = Some(x);
                if let Some(gt) = scene.texture_color(x) {
                    let c = canvas.color[i];
                    for k in 0..3 {
                        s += ((c[k] - gt[k]) as f64).powi(2);
                    }
                    n += 1;
                }
            }
            (s, n)
        })
        .collect();
    let (s, n) = per_row.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if n == 0 {
        (0.0, 0)
    } else {
        ((s / (3 * n) as f64).sqrt(), n)
    }
}

/// Precision/recall of inlier labels against ground-truth correspondence
/// between frames `from` and `to`; a match is true if its target lies
/// within `tolerance` px of the true image of its source.
pub fn label_quality(
    scene: &SyntheticScene,
    from: usize,
    to: usize,
    matches: &[crate::MatchPair],
    labels: &[bool],
    tolerance: f64,
) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (m, &l) in matches.iter().zip(labels) {
        let truth = scene.project(scene.world_of_pixel(m.point_a, from), to);
        let good = (truth - m.point_b).norm() < tolerance;
        match (l, good) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    (ratio(tp, fp), ratio(tp, fneg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(path: PathKind, displacement: f64) -> SceneConfig {
        SceneConfig {
            width: 96,
            height: 64,
            frames: 10,
            path,
            path_extent: [30.0, 5.0],
            path_rotation: 0.0,
            path_zoom: 1.0,
            max_displacement: displacement,
            ..Default::default()
        }
    }

    #[test]
    fn static_undeformed_frames_are_identical() {
        let s = SyntheticScene::new(small(PathKind::Static, 0.0)).unwrap();
        let (f0, _) = s.render(0);
        let (f5, _) = s.render(5);
        assert_eq!(f0.data, f5.data);
    }

    #[test]
    fn label_quality_counts_true_and_false_labels() {
        let s = SyntheticScene::new(small(PathKind::Translate, 3.0)).unwrap();
        let src: Vec<Vec2> = (0..4).map(|i| Vec2::new(20.0 + 15.0 * i as f64, 30.0)).collect();
        let mut matches: Vec<_> = src.iter().map(|&a| crate::MatchPair::new(a, s.project(s.world_of_pixel(a, 0), 3), 1.0)).collect();
        matches[3].point_b += Vec2::new(10.0, 0.0);
        // labelled inlier: 0, 1, 3; true: 0, 1, 2
        let (precision, recall) = label_quality(&s, 0, 3, &matches, &[true, true, false, true], 1.0);
        assert!((precision.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(label_quality(&s, 0, 3, &[], &[], 1.0), (None, None));
    }

    #[test]
    fn translating_camera_gives_shifted_crops() {
        let mut cfg = small(PathKind::Translate, 0.0);
        cfg.frames = 4;
        cfg.path_extent = [9.0, 0.0];
        let s = SyntheticScene::new(cfg).unwrap();
        let (f0, _) = s.render(0);
        let (f1, _) = s.render(1);
        // Camera moves +3 px per frame, so content shifts left by 3.
        for y in 0..64 {
            for x in 0..90 {
                let a = f0.get(x + 3, y);
                let b = f1.get(x, y);
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn correspondence_round_trip() {
        let s = SyntheticScene::new(small(PathKind::Translate, 15.0)).unwrap();
        let (_, map) = s.render(7);
        let mut worst: f64 = 0.0;
        for y in (0..64).step_by(3) {
            for x in (0..96).step_by(3) {
                let u = Vec2::new(x as f64, y as f64);
                worst = worst.max((s.project(map.get(x, y), 7) - u).norm());
            }
        }
        // Stored as f32 world coordinates, so allow for that rounding.
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = small(PathKind::Translate, 15.0);
        cfg.noise = 0.01;
        let a = SyntheticScene::new(cfg.clone()).unwrap().render(3);
        let b = SyntheticScene::new(cfg).unwrap().render(3);
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn steep_bump_rejected() {
        let mut cfg = small(PathKind::Static, 15.0);
        cfg.bumps = vec![Bump { center: [40.0, 30.0], direction: [1.0, 0.0], sigma: 10.0, amplitude: 15.0, period: 50.0, phase: 0.0 }];
        assert!(matches!(SyntheticScene::new(cfg), Err(Error::Scene(_))));
    }

    #[test]
    fn map_file_round_trip() {
        let s = SyntheticScene::new(small(PathKind::Static, 5.0)).unwrap();
        let (_, map) = s.render(0);
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 96 * 64 * 8);
        assert_eq!(&buf[..8], b"NRMCORR1");
        assert_eq!(CorrespondenceMap::read_from(&mut buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn nodes_outside_the_reference_view_are_scored_from_first_sight() {
        let s = SyntheticScene::new(small(PathKind::Translate, 10.0)).unwrap();
        let anchor = Vec2::new(-40.0, 30.0);
        // Seen first at frame 1 somewhere other than the anchor's image; only
        // motion after that counts.
        let entry = Vec2::new(5.0, 30.0);
        let world = s.world_of_pixel(entry, 1);
        let traj: Vec<FrameNodes> = (0..4)
            .map(|t| FrameNodes {
                frame: t,
                anchors: vec![anchor],
                positions: vec![if t == 0 { Vec2::new(-30.0, 30.0) } else { s.project(world, t) }],
            })
            .collect();
        let r = evaluate(&s, &traj, None);
        assert!(r.node_samples >= 1);
        assert!(r.node_rmse < 1e-9, "{r:?}");
    }

    #[test]
    fn perfect_and_offset_estimates() {
        let s = SyntheticScene::new(small(PathKind::Translate, 10.0)).unwrap();
        let anchors: Vec<Vec2> = (0..5).map(|i| Vec2::new(20.0 + 10.0 * i as f64, 30.0)).collect();
        let truth: Vec<FrameNodes> = (0..3)
            .map(|t| FrameNodes { frame: t, anchors: anchors.clone(), positions: anchors.iter().map(|a| s.true_position(*a, t)).collect() })
            .collect();
        let r = evaluate(&s, &truth, None);
        assert!(r.node_rmse < 1e-9 && r.drift < 1e-9);
        let shifted: Vec<FrameNodes> = truth
            .iter()
            .map(|f| FrameNodes { positions: f.positions.iter().map(|p| p + Vec2::new(3.0, 4.0)).collect(), ..f.clone() })
            .collect();
        let r = evaluate(&s, &shifted, None);
        assert!((r.node_rmse - 5.0).abs() < 1e-9);
        assert!((r.drift - 5.0).abs() < 1e-9);
        let mut permuted = shifted.clone();
        for f in &mut permuted {
            f.anchors.reverse();
            f.positions.reverse();
        }
        assert!((evaluate(&s, &permuted, None).node_rmse - 5.0).abs() < 1e-9);
    }

    #[test]
    fn scene_toml_round_trip() {
        let cfg = SceneConfig { seed: 9, path: PathKind::OutAndBack, ..Default::default() };
        assert_eq!(SceneConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn out_and_back_returns() {
        let cfg = SceneConfig { path: PathKind::OutAndBack, frames: 21, ..Default::default() };
        let s = SyntheticScene::new(cfg).unwrap();
        assert_eq!(s.camera(0), s.camera(20));
        assert_ne!(s.camera(0), s.camera(10));
    }
}
