//! Toolkit for top-down person pose estimation from aerial footage: COCO
//! dataset merging, crop geometry, heatmap encoding and decoding, COCO
//! evaluation, an inference pipeline with pluggable backends, overlay
//! rendering and latency benchmarking.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32`/`f64`); latency
//! arithmetic also accepts exact rationals. Common instantiations are
//! aliased below.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod bench;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod keypoints;
pub mod pipeline;
pub mod render;
pub mod scalar;

pub type BBox64 = geometry::BBox<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type Point64 = geometry::Point<f64>;
pub type Point32 = geometry::Point<f32>;
pub type PatchTransform64 = geometry::PatchTransform<f64>;
pub type PatchTransform32 = geometry::PatchTransform<f32>;
pub type KeypointSet64 = keypoints::KeypointSet<f64>;
pub type KeypointSet32 = keypoints::KeypointSet<f32>;
pub type HeatmapStack64 = heatmap::HeatmapStack<f64>;
pub type HeatmapStack32 = heatmap::HeatmapStack<f32>;
pub type CodecConfig64 = heatmap::CodecConfig<f64>;
pub type CodecConfig32 = heatmap::CodecConfig<f32>;
/// Exact milliseconds for budget arithmetic.
pub type ExactMs = num_rational::Ratio<i64>;
pub type LatencyReport64 = bench::LatencyReport<f64>;
pub type ExactLatencyReport = bench::LatencyReport<ExactMs>;
