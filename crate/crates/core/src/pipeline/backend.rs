use image::RgbImage;
use thiserror::Error;

use crate::geometry::{BBox, PatchTransform};
use crate::heatmap::HeatmapStack;

use super::DEFAULT_DETECTOR_INPUT;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{0}")]
    Failed(String),
    #[error("backend I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend protocol: {0}")]
    Protocol(String),
}

/// Letterboxed detector input.
#[derive(Debug, Clone)]
pub struct DetectorInput {
    pub frame_id: u64,
    /// `input_size × input_size` canvas.
    pub image: RgbImage,
    /// Frame → canvas mapping.
    pub transform: PatchTransform<f64>,
}

/// One person crop.
#[derive(Debug, Clone)]
pub struct PatchInput {
    pub frame_id: u64,
    /// Position of the detection in the frame's score order.
    pub index: usize,
    /// Detection box in frame coordinates.
    pub detection: BBox<f64>,
    /// 192×256 RGB patch.
    pub image: RgbImage,
    /// Frame → patch mapping.
    pub transform: PatchTransform<f64>,
}

/// Person detector. Boxes are returned in canvas coordinates with scores.
pub trait DetectorBackend: Send {
    /// Side of the square letterbox canvas.
    fn input_size(&self) -> u32 {
        DEFAULT_DETECTOR_INPUT
    }

    fn detect(&mut self, input: &DetectorInput) -> Result<Vec<BBox<f64>>, BackendError>;
}

/// Single-person pose estimator on 192×256 patches.
pub trait PoseBackend: Send {
    fn estimate(&mut self, patch: &PatchInput) -> Result<HeatmapStack<f64>, BackendError>;

    /// Grouped call; the default issues one call per patch.
    fn estimate_batch(
        &mut self,
        patches: &[PatchInput],
    ) -> Result<Vec<HeatmapStack<f64>>, BackendError> {
        patches.iter().map(|p| self.estimate(p)).collect()
    }
}

impl<B: DetectorBackend + ?Sized> DetectorBackend for Box<B> {
    fn input_size(&self) -> u32 {
        (**self).input_size()
    }

    fn detect(&mut self, input: &DetectorInput) -> Result<Vec<BBox<f64>>, BackendError> {
        (**self).detect(input)
    }
}

impl<B: PoseBackend + ?Sized> PoseBackend for Box<B> {
    fn estimate(&mut self, patch: &PatchInput) -> Result<HeatmapStack<f64>, BackendError> {
        (**self).estimate(patch)
    }

    fn estimate_batch(
        &mut self,
        patches: &[PatchInput],
    ) -> Result<Vec<HeatmapStack<f64>>, BackendError> {
        (**self).estimate_batch(patches)
    }
}
