//! Reduced dual quaternions for planar rigid motion, and the scaled warp
//! functions built on top of them.
//!
//! A planar rigid motion embedded in 3D keeps the image on the `z = 0`
//! plane, so four of the eight dual-quaternion components vanish. The
//! remaining ones are stored as
//!
//! ```text
//! real = [w, z]     rotation quaternion  w + z·k,  w = cos(θ/2), z = sin(θ/2)
//! dual = [x, y]     dual part            ε(x·i + y·j) = ε·½·t·real
//! ```
//!
//! With this layout the real and dual parts are always orthogonal, so
//! normalization only has to divide by the norm of the real part.
//!
//! Products follow the usual quaternion convention: applying `a * b` to a
//! point applies `b` first, then `a`.

use std::ops::{Mul, Neg};

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::{Error, Vec2};

/// Planar unit dual quaternion (4-component reduced form).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualQuat2 {
    /// `[cos θ/2, sin θ/2]`
    pub real: [f64; 2],
    /// Dual (translation-carrying) components along `i` and `j`.
    pub dual: [f64; 2],
}

impl Default for DualQuat2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl DualQuat2 {
    pub const IDENTITY: Self = Self { real: [1.0, 0.0], dual: [0.0, 0.0] };

    /// Rotation by `angle` (radians, counter-clockwise) followed by `translation`.
    pub fn from_rigid(angle: f64, translation: Vec2) -> Self {
        let (z, w) = (0.5 * angle).sin_cos();
        Self::from_real_translation([w, z], translation)
    }

    /// Pure translation.
    pub fn from_translation(translation: Vec2) -> Self {
        Self { real: [1.0, 0.0], dual: [0.5 * translation.x, 0.5 * translation.y] }
    }

    /// Builds from a rotation matrix (assumed orthonormal, det = +1) and a translation.
    pub fn from_rotation_matrix(rot: &Matrix2<f64>, translation: Vec2) -> Self {
        let angle = rot[(1, 0)].atan2(rot[(0, 0)]);
        Self::from_rigid(angle, translation)
    }

    fn from_real_translation(real: [f64; 2], t: Vec2) -> Self {
        let [w, z] = real;
        // dual = ½ · t · real, with t a pure i/j quaternion.
        Self { real, dual: [0.5 * (t.x * w + t.y * z), 0.5 * (t.y * w - t.x * z)] }
    }

    /// Squared norm of the real part.
    #[inline]
    pub fn real_norm_sq(&self) -> f64 {
        self.real[0] * self.real[0] + self.real[1] * self.real[1]
    }

    /// Divides both parts by the real-part norm.
    pub fn normalize(&self) -> Self {
        let n = self.real_norm_sq().sqrt();
        if n == 0.0 {
            return *self;
        }
        let inv = 1.0 / n;
        Self { real: [self.real[0] * inv, self.real[1] * inv], dual: [self.dual[0] * inv, self.dual[1] * inv] }
    }

    /// Rotation matrix encoded by the real part.
    #[inline]
    pub fn rotation(&self) -> Matrix2<f64> {
        let [w, z] = self.real;
        let n2 = self.real_norm_sq();
        let c = (w * w - z * z) / n2;
        let s = 2.0 * w * z / n2;
        Matrix2::new(c, -s, s, c)
    }

    /// Rotation angle in `(-π, π]`.
    pub fn angle(&self) -> f64 {
        let [w, z] = self.real;
        (2.0 * w * z).atan2(w * w - z * z)
    }

    /// Translation encoded by the dual part.
    #[inline]
    pub fn translation(&self) -> Vec2 {
        let [w, z] = self.real;
        let [x, y] = self.dual;
        let n2 = self.real_norm_sq();
        Vec2::new(2.0 * (w * x - z * y) / n2, 2.0 * (z * x + w * y) / n2)
    }

    /// `R·p + t`.
    #[inline]
    pub fn apply(&self, p: Vec2) -> Vec2 {
        self.rotation() * p + self.translation()
    }

    /// Conjugate of both parts; the exact inverse for unit dual quaternions.
    pub fn inverse(&self) -> Self {
        Self { real: [self.real[0], -self.real[1]], dual: [-self.dual[0], -self.dual[1]] }
    }

    /// Four-component dot product; the sign decides the hemisphere.
    #[inline]
    pub fn dot(&self, other: &Self) -> f64 {
        self.real[0] * other.real[0] + self.real[1] * other.real[1] + self.dual[0] * other.dual[0] + self.dual[1] * other.dual[1]
    }

    /// Returns `self` or its negation, whichever has a non-negative real-part
    /// dot product with `pivot`. Both represent the same motion.
    #[inline]
    pub fn hemisphere(&self, pivot: &Self) -> Self {
        let d = self.real[0] * pivot.real[0] + self.real[1] * pivot.real[1];
        if d < 0.0 {
            -*self
        } else {
            *self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.real.iter().chain(self.dual.iter()).all(|v| v.is_finite())
    }
}

impl Neg for DualQuat2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self { real: [-self.real[0], -self.real[1]], dual: [-self.dual[0], -self.dual[1]] }
    }
}

impl Mul for DualQuat2 {
    type Output = Self;

    /// `(a_r + ε a_d)(b_r + ε b_d) = a_r b_r + ε(a_r b_d + a_d b_r)`
    fn mul(self, b: Self) -> Self {
        let [w1, z1] = self.real;
        let [x1, y1] = self.dual;
        let [w2, z2] = b.real;
        let [x2, y2] = b.dual;
        Self {
            real: [w1 * w2 - z1 * z2, w1 * z2 + z1 * w2],
            dual: [(w1 * x2 - z1 * y2) + (x1 * w2 + y1 * z2), (w1 * y2 + z1 * x2) + (y1 * w2 - x1 * z2)],
        }
    }
}

/// Rigid motion constructor: `x ↦ R(angle)·x + translation`.
pub fn dq_from_rigid(angle: f64, translation: Vec2) -> DualQuat2 {
    DualQuat2::from_rigid(angle, translation)
}

/// Converts a translation vector to the corresponding dual quaternion.
pub fn trans2dq(translation: Vec2) -> DualQuat2 {
    DualQuat2::from_translation(translation)
}

/// Composition: applying the result equals applying `b`, then `a`.
pub fn dq_mul(a: DualQuat2, b: DualQuat2) -> DualQuat2 {
    a * b
}

/// Scaled rigid motion `x ↦ s·(R·x + t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpFunction {
    pub scale: f64,
    pub dq: DualQuat2,
}

impl Default for WarpFunction {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl WarpFunction {
    pub const IDENTITY: Self = Self { scale: 1.0, dq: DualQuat2::IDENTITY };

    pub fn new(scale: f64, dq: DualQuat2) -> Self {
        Self { scale, dq }
    }

    /// `x ↦ scale·(R(angle)·x + translation)`.
    pub fn from_params(scale: f64, angle: f64, translation: Vec2) -> Self {
        Self::new(scale, DualQuat2::from_rigid(angle, translation))
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0 && self.scale.is_finite() && self.dq.is_finite()
    }

    #[inline]
    pub fn apply(&self, x: Vec2) -> Vec2 {
        self.scale * self.dq.apply(x)
    }

    /// Inverse of [`apply`](Self::apply): `Rᵀ(y/s − t)`.
    pub fn unapply(&self, y: Vec2) -> Result<Vec2, Error> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidWarp(self.scale));
        }
        let r = self.dq.rotation();
        Ok(r.transpose() * (y / self.scale - self.dq.translation()))
    }

    /// The warp whose action undoes this one.
    pub fn inverse(&self) -> Result<Self, Error> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidWarp(self.scale));
        }
        // W⁻¹(y) = Rᵀ(y/s − t) = (1/s)·(Rᵀ y − s·Rᵀ t)
        let inv = self.dq.inverse();
        let r_t = inv.rotation();
        let t = -self.scale * (r_t * self.dq.translation());
        Ok(Self::new(1.0 / self.scale, DualQuat2::from_rigid(inv.angle(), t)))
    }
}

/// Applies a warp to a point.
pub fn warp_apply(w: &WarpFunction, x: Vec2) -> Vec2 {
    w.apply(x)
}

/// Maps a point back through a warp.
pub fn warp_unapply(w: &WarpFunction, y: Vec2) -> Result<Vec2, Error> {
    w.unapply(y)
}

/// Weighted blend of scaled dual quaternions.
///
/// Scales are averaged linearly; dual quaternions are flipped onto the
/// hemisphere of the first positively weighted element, summed with the
/// weights and renormalized. Any positive rescaling of `weights` gives the
/// same result.
pub fn dq_blend(weights: &[f64], dqs: &[DualQuat2], scales: &[f64]) -> Result<WarpFunction, Error> {
    if weights.len() != dqs.len() || weights.len() != scales.len() {
        return Err(Error::LengthMismatch);
    }
    let mut acc = BlendAccumulator::default();
    for ((&w, dq), &s) in weights.iter().zip(dqs).zip(scales) {
        acc.add(w, dq, s);
    }
    acc.finish().ok_or(Error::NoSupport)
}

/// Same as [`dq_blend`] over warp functions.
pub fn blend_warps(weights: &[f64], warps: &[WarpFunction]) -> Result<WarpFunction, Error> {
    if weights.len() != warps.len() {
        return Err(Error::LengthMismatch);
    }
    let mut acc = BlendAccumulator::default();
    for (&w, warp) in weights.iter().zip(warps) {
        acc.add(w, &warp.dq, warp.scale);
    }
    acc.finish().ok_or(Error::NoSupport)
}

/// Streaming form of [`dq_blend`], used in hot loops to avoid building slices.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlendAccumulator {
    pivot: Option<DualQuat2>,
    sum: [f64; 4],
    scale_sum: f64,
    weight_sum: f64,
}

impl BlendAccumulator {
    #[inline]
    pub fn add(&mut self, weight: f64, dq: &DualQuat2, scale: f64) {
        if !(weight > 0.0) {
            return;
        }
        let pivot = *self.pivot.get_or_insert(*dq);
        let q = dq.hemisphere(&pivot);
        self.sum[0] += weight * q.real[0];
        self.sum[1] += weight * q.real[1];
        self.sum[2] += weight * q.dual[0];
        self.sum[3] += weight * q.dual[1];
        self.scale_sum += weight * scale;
        self.weight_sum += weight;
    }

    #[inline]
    pub fn add_warp(&mut self, weight: f64, warp: &WarpFunction) {
        self.add(weight, &warp.dq, warp.scale);
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn finish(&self) -> Option<WarpFunction> {
        if !(self.weight_sum > 0.0) {
            return None;
        }
        let dq = DualQuat2 { real: [self.sum[0], self.sum[1]], dual: [self.sum[2], self.sum[3]] };
        if dq.real_norm_sq() == 0.0 {
            return None;
        }
        Some(WarpFunction::new(self.scale_sum / self.weight_sum, dq.normalize()))
    }
}

/// Warp update law: returns `W_new` with `W_new(x₀) = ΔW(W_old(x₀))`.
///
/// `q₁` re-expresses the increment's translation in the old scale frame so
/// that the scales can simply multiply: `s_new = Δs·s_old`.
pub fn warp_update(old: &WarpFunction, delta: &WarpFunction) -> WarpFunction {
    let s_old = old.scale;
    let dt = delta.dq.translation();
    let q1 = trans2dq(dt * ((1.0 - s_old) / s_old));
    // Motion order: q_old first, then Δq, then q₁.
    let q2 = q1 * delta.dq;
    let q_new = (q2 * old.dq).normalize();
    WarpFunction::new(delta.scale * s_old, q_new)
}

/// 2×2 rotation matrix for `angle`.
pub fn rotation_matrix(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}
