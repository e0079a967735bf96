//! Pipeline parameters.
//!
//! Kernel exponents (`alpha`, `beta`, `gamma`, `field_alpha`) multiply
//! squared pixel distances and pixel thresholds are lengths, so both are
//! defined at a 480×270 reference resolution and rescaled to the input:
//! with `s = (w/480 + h/270)/2`, exponents are multiplied by `1/s²` and
//! lengths by `s`.
//!
//! Config files are TOML; nested tables hold the detector and estimator
//! settings:
//!
//! ```toml
//! alpha = 0.0002
//! loop_stride = 5
//!
//! [estimator]
//! inlier_threshold = 5.0
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::features::DetectorConfig;
use crate::fieldest::EstimatorParams;
use crate::{Error, Result};

pub const REFERENCE_WIDTH: f64 = 480.0;
pub const REFERENCE_HEIGHT: f64 = 270.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Node/pixel and ARAP neighbour weight exponent, 1/px².
    pub alpha: f64,
    /// Uncertainty growth with distance to feature inliers, 1/px².
    pub beta: f64,
    /// Tracking/loop correlation falloff, 1/px².
    pub gamma: f64,
    /// Loop closing runs every `loop_stride` frames.
    pub loop_stride: usize,
    /// Every `blend_stride`-th frame is blended into the mosaic.
    pub blend_stride: usize,
    pub loop_closing: bool,
    /// Mean node displacement that triggers a new keyframe, px.
    pub keyframe_h: f64,
    /// Node lattice pitch, px.
    pub hex_spacing: f64,
    pub arap_iters: usize,
    /// Fixed variance of the ARAP prediction.
    pub arap_variance: f64,
    /// Neighbour weights below this are dropped from ARAP fits.
    pub arap_min_weight: f64,
    /// Running-average weight cap of the mosaic.
    pub max_merge_weight: u16,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub estimator: EstimatorParams,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            alpha: 2e-4,
            beta: 3e-3,
            gamma: 5e-3,
            loop_stride: 5,
            blend_stride: 2,
            loop_closing: true,
            keyframe_h: 40.0,
            hex_spacing: 60.0,
            arap_iters: 5,
            arap_variance: 100.0,
            arap_min_weight: 1e-3,
            max_merge_weight: 30,
            workers: 0,
            seed: 0,
            detector: DetectorConfig::default(),
            estimator: EstimatorParams::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("keyframe_h", self.keyframe_h),
            ("hex_spacing", self.hex_spacing),
            ("arap_variance", self.arap_variance),
            ("arap_min_weight", self.arap_min_weight),
            ("estimator.inlier_threshold", self.estimator.inlier_threshold),
            ("estimator.field_alpha", self.estimator.field_alpha),
            ("detector.ratio", self.detector.ratio),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config { field: field.into(), msg: format!("must be positive, got {v}") });
            }
        }
        for (field, v) in [("loop_stride", self.loop_stride), ("blend_stride", self.blend_stride)] {
            if v < 1 {
                return Err(Error::Config { field: field.into(), msg: "must be at least 1".into() });
            }
        }
        if self.max_merge_weight == 0 {
            return Err(Error::Config { field: "max_merge_weight".into(), msg: "must be at least 1".into() });
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Applies a `dotted.key=value` override, value in TOML syntax.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let cfg = with_override(self, assignment)?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

/// Maps a TOML parse error to the key on the offending line.
pub(crate) fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    Error::Config {
        field: e.span().map_or_else(String::new, |s| {
            // The span may cover the key or the value; take the key on that line.
            let start = text[..s.start].rfind('\n').map_or(0, |i| i + 1);
            let end = text[s.start..].find('\n').map_or(text.len(), |i| s.start + i);
            text[start..end].split('=').next().unwrap_or("").trim().to_string()
        }),
        msg: e.message().to_string(),
    }
}

/// Returns a copy of `value` with one `dotted.key=value` assignment applied.
/// Unquoted values that are not valid TOML are taken as strings.
pub(crate) fn with_override<T: Serialize + DeserializeOwned>(value: &T, assignment: &str) -> Result<T> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config { field: assignment.into(), msg: "expected key=value".into() })?;
    let key = key.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut root = toml::Table::try_from(value).expect("value serializes");
    let mut table = &mut root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        table = match table.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config { field: key.into(), msg: "unknown section".into() }),
        };
    }
    let leaf = parts[parts.len() - 1];
    if !table.contains_key(leaf) {
        return Err(Error::Config { field: key.into(), msg: "unknown field".into() });
    }
    table.insert(leaf.to_string(), parsed);
    root.try_into().map_err(|e: toml::de::Error| Error::Config { field: key.into(), msg: e.message().to_string() })
}

/// Resolution scale relative to 480×270.
pub fn resolution_scale(width: usize, height: usize) -> f64 {
    (width as f64 / REFERENCE_WIDTH + height as f64 / REFERENCE_HEIGHT) / 2.0
}

/// Parameters after resolution scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveParams {
    pub scale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub keyframe_h: f64,
    pub hex_spacing: f64,
    pub loop_stride: usize,
    pub blend_stride: usize,
    pub loop_closing: bool,
    pub arap_iters: usize,
    pub arap_variance: f64,
    pub arap_min_weight: f64,
    pub max_merge_weight: u16,
    pub detector: DetectorConfig,
    pub estimator: EstimatorParams,
}

/// Rescales exponents by `1/s²` and pixel lengths by `s`.
pub fn resolve_scaled_params(config: &Config, width: usize, height: usize) -> EffectiveParams {
    let s = resolution_scale(width.max(1), height.max(1));
    let inv_s2 = 1.0 / (s * s);
    EffectiveParams {
        scale: s,
        alpha: config.alpha * inv_s2,
        beta: config.beta * inv_s2,
        gamma: config.gamma * inv_s2,
        keyframe_h: config.keyframe_h * s,
        hex_spacing: config.hex_spacing * s,
        loop_stride: config.loop_stride,
        blend_stride: config.blend_stride,
        loop_closing: config.loop_closing,
        arap_iters: config.arap_iters,
        arap_variance: config.arap_variance,
        arap_min_weight: config.arap_min_weight,
        max_merge_weight: config.max_merge_weight,
        detector: config.detector.scaled(s),
        estimator: EstimatorParams {
            inlier_threshold: config.estimator.inlier_threshold * s,
            field_alpha: config.estimator.field_alpha * inv_s2,
            beta: config.beta * inv_s2,
            min_spread: config.estimator.min_spread * s,
            seed: config.estimator.seed ^ config.seed,
            ..config.estimator.clone()
        },
    }
}
