//! Real-time non-rigid 2D SLAM and dense mosaicking.
//!
//! The scene deformation is represented by a graph of deformation nodes,
//! each carrying a scaled planar dual-quaternion warp. Every frame the nodes
//! are tracked from the previous frame, periodically re-anchored against
//! stored keyframes, fused by uncertainty, smoothed with an
//! as-rigid-as-possible regularizer and finally used to warp the frame's
//! pixels into a growing reference-frame mosaic.
//!
//! Module map:
//!
//! - [`dq2`]: reduced dual-quaternion algebra and warp functions
//! - [`features`]: single-scale detector, descriptor matching, match files
//! - [`fieldest`]: robust sparse-to-dense deformation field estimation
//! - [`slam`]: node graph, tracking, keyframes, loop closing, fusion, ARAP
//! - [`mosaic`]: per-pixel warp interpolation and running-average blending
//! - [`synth`]: synthetic deforming scenes with ground truth, evaluation
//! - [`config`]: parameters and resolution scaling
//! - [`pipeline`]: frame-by-frame driver tying tracking and blending together

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dq2;
pub mod features;
pub mod fieldest;
pub mod mosaic;
pub mod pipeline;
pub mod raster;
pub mod slam;
pub mod synth;

pub use config::{resolve_scaled_params, Config, EffectiveParams};
pub use dq2::{DualQuat2, WarpFunction};
pub use features::{FrameFeatures, Keypoint, MatchPair};
pub use fieldest::{estimate_field, EstimatorParams, FieldEstimate};
pub use mosaic::Canvas;
pub use pipeline::{FrameReport, FrameStatus, Pipeline};
pub use raster::{ColorImage, GrayImage};
pub use slam::{KeyFrame, Node, NodeGraph};

/// 2D point or vector in pixels.
pub type Vec2 = nalgebra::Vector2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid warp: scale {0} is not positive")]
    InvalidWarp(f64),
    #[error("blend has no positively weighted support")]
    NoSupport,
    #[error("input lists have different lengths")]
    LengthMismatch,
    #[error("field estimation failed: {0}")]
    EstimationFailure(String),
    #[error("image format error: {0}")]
    Format(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("synthetic scene: {0}")]
    Scene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
