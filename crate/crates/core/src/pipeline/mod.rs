//! Top-down inference flow: frame → person detector → per-person patch →
//! pose backend → keypoints in frame coordinates.

mod backend;
mod mock;
mod protocol;
mod source;

use std::fmt;
use std::sync::mpsc;
use std::time::Instant;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{downscale_patch_with, DownscaleSpec};
use crate::eval::{detections_to_json, Detection};
use crate::geometry::{
    clip_box, letterbox_transform, make_patch_transform_expanded, BBox, PatchTransform, Point,
    PATCH_HEIGHT, PATCH_WIDTH,
};
use crate::heatmap::{decode, CodecConfig, HeatmapStack};
use crate::keypoints::KeypointSet;

pub use backend::{BackendError, DetectorBackend, DetectorInput, PatchInput, PoseBackend};
pub use mock::{GroundTruthPeople, MockDetector, MockPose};
pub use protocol::{
    decode_boxes, decode_request, encode_boxes, encode_detect_request, encode_pose_request,
    read_message, serve, write_message, ExternalDetector, ExternalPose, ProcessBackend, Request,
    MSG_DETECT, MSG_POSE,
};
pub use source::{load_frame, DecoderFrames, DirectoryFrames};

pub const DEFAULT_DETECTOR_INPUT: u32 = 1280;
pub const DEFAULT_DET_CONF_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {id}: {message}")]
    InvalidFrame { id: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("frame source: {0}")]
    Source(String),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

/// One RGB video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, `width * height * 3` bytes.
    pub data: Vec<u8>,
    pub timestamp_ms: f64,
}

impl Frame {
    pub fn new(
        id: u64,
        width: u32,
        height: u32,
        data: Vec<u8>,
        timestamp_ms: f64,
    ) -> Result<Self, PipelineError> {
        if width == 0 || height == 0 {
            return Err(PipelineError::InvalidFrame {
                id,
                message: format!("empty frame {width}x{height}"),
            });
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(PipelineError::InvalidFrame {
                id,
                message: format!("expected {expected} bytes of RGB data, got {}", data.len()),
            });
        }
        Ok(Self {
            id,
            width,
            height,
            data,
            timestamp_ms,
        })
    }

    pub fn from_image(id: u64, image: RgbImage, timestamp_ms: f64) -> Result<Self, PipelineError> {
        let (w, h) = image.dimensions();
        Self::new(id, w, h, image.into_raw(), timestamp_ms)
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("validated frame")
    }

    fn pixel(&self, x: i64, y: i64) -> [f64; 3] {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return [0.0; 3];
        }
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [
            self.data[i] as f64,
            self.data[i + 1] as f64,
            self.data[i + 2] as f64,
        ]
    }

    /// Bilinear sample at a continuous position; outside pixels are black.
    fn sample(&self, p: Point<f64>) -> [u8; 3] {
        let (x0, y0) = (p.x.floor(), p.y.floor());
        let (fx, fy) = (p.x - x0, p.y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let a = self.pixel(x0, y0);
        let b = self.pixel(x0 + 1, y0);
        let c = self.pixel(x0, y0 + 1);
        let d = self.pixel(x0 + 1, y0 + 1);
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            (top + (bottom - top) * fy).round().clamp(0.0, 255.0) as u8
        })
    }
}

/// Resamples the region described by `t` into a `dst_w × dst_h` image by
/// inverse bilinear mapping; padding is black.
pub fn warp(frame: &Frame, t: &PatchTransform<f64>) -> RgbImage {
    let (w, h) = (t.dst_w.round() as u32, t.dst_h.round() as u32);
    RgbImage::from_fn(w, h, |u, v| {
        image::Rgb(frame.sample(t.patch_to_image(Point::new(u as f64, v as f64))))
    })
}

/// Aspect-preserving resize to a `side × side` canvas with symmetric padding.
pub fn letterbox(frame: &Frame, side: u32) -> Result<(RgbImage, PatchTransform<f64>), PipelineError> {
    let t = letterbox_transform(frame.width as f64, frame.height as f64, side as f64)
        .map_err(|e| PipelineError::InvalidFrame {
            id: frame.id,
            message: e.to_string(),
        })?;
    Ok((warp(frame, &t), t))
}

/// How per-person pose calls are issued within a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum PoseMode {
    /// One call per detection.
    #[default]
    Sequential,
    /// Patches grouped into batches of at most `size`.
    Batched { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Sequential,
    /// Detection of frame `k + 1` overlaps pose estimation of frame `k`.
    Pipelined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub det_conf_threshold: f64,
    /// Growth of each detection about its centre before cropping.
    pub box_expansion: f64,
    pub codec: CodecConfig<f64>,
    pub pose_mode: PoseMode,
    /// Optional resolution stress: each patch is downscaled and restored
    /// before the pose backend sees it.
    pub stress: Option<DownscaleSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            det_conf_threshold: DEFAULT_DET_CONF_THRESHOLD,
            box_expansion: 1.0,
            codec: CodecConfig::default(),
            pose_mode: PoseMode::Sequential,
            stress: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.det_conf_threshold) {
            return bad(format!(
                "detection threshold must lie in [0, 1], got {}",
                self.det_conf_threshold
            ));
        }
        if !(self.box_expansion > 0.0) || !self.box_expansion.is_finite() {
            return bad(format!("box expansion must be positive, got {}", self.box_expansion));
        }
        if let PoseMode::Batched { size: 0 } = self.pose_mode {
            return bad("batch size must be positive".into());
        }
        self.codec
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(s) = &self.stress {
            s.validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Source,
    Preprocess,
    Detect,
    Crop,
    Pose,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Source => "source",
            Stage::Preprocess => "preprocess",
            Stage::Detect => "detect",
            Stage::Crop => "crop",
            Stage::Pose => "pose",
            Stage::Decode => "decode",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("frame {frame_id}: {stage} stage failed: {message}")]
pub struct FrameError {
    pub frame_id: u64,
    pub stage: Stage,
    pub message: String,
}

/// Wall-clock time spent per stage of one frame, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub detect_ms: f64,
    pub crop_ms: f64,
    pub pose_ms: f64,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    /// Detection box in frame coordinates, carrying the detector score.
    pub bbox: BBox<f64>,
    /// Frame coordinates with per-point confidences.
    pub keypoints: KeypointSet<f64>,
}

impl Person {
    pub fn score(&self) -> f64 {
        self.bbox.score.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub frame_id: u64,
    /// Ordered by descending detection score.
    pub persons: Vec<Person>,
    pub timings: StageTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Output of the detection half of [`run_frame`].
#[derive(Debug, Clone)]
pub struct DetectedFrame {
    pub boxes: Vec<BBox<f64>>,
    pub timings: StageTimings,
}

/// Letterboxes, detects, maps boxes back to the frame, drops those below
/// the threshold and sorts by descending score (stable).
pub fn detect_stage<D: DetectorBackend + ?Sized>(
    frame: &Frame,
    det: &mut D,
    cfg: &RunConfig,
) -> Result<DetectedFrame, FrameError> {
    let fail = |stage, message: String| FrameError {
        frame_id: frame.id,
        stage,
        message,
    };
    let mut timings = StageTimings::default();
    let t0 = Instant::now();
    let (image, transform) =
        letterbox(frame, det.input_size()).map_err(|e| fail(Stage::Preprocess, e.to_string()))?;
    timings.preprocess_ms = ms_since(t0);

    let input = DetectorInput {
        frame_id: frame.id,
        image,
        transform,
    };
    let t0 = Instant::now();
    let raw = det
        .detect(&input)
        .map_err(|e| fail(Stage::Detect, e.to_string()))?;
    timings.detect_ms = ms_since(t0);

    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let mut boxes: Vec<BBox<f64>> = raw
        .iter()
        .filter(|b| b.score.unwrap_or(0.0) >= cfg.det_conf_threshold)
        .map(|b| clip_box(&transform.box_to_image(b), fw, fh))
        .filter(|b| b.has_positive_extent())
        .collect();
    boxes.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .total_cmp(&a.score.unwrap_or(0.0))
    });
    Ok(DetectedFrame { boxes, timings })
}

/// Crops each detection, runs the pose backend and decodes keypoints into
/// frame coordinates.
pub fn pose_stage<P: PoseBackend + ?Sized>(
    frame: &Frame,
    detected: DetectedFrame,
    pose: &mut P,
    cfg: &RunConfig,
) -> Result<PoseResult, FrameError> {
    let fail = |stage, message: String| FrameError {
        frame_id: frame.id,
        stage,
        message,
    };
    let mut timings = detected.timings;
    let (fw, fh) = (frame.width as f64, frame.height as f64);

    let t0 = Instant::now();
    let mut rng = cfg
        .stress
        .map(|s| ChaCha8Rng::seed_from_u64(s.seed ^ frame.id.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut patches = Vec::with_capacity(detected.boxes.len());
    for (index, b) in detected.boxes.iter().enumerate() {
        let transform = make_patch_transform_expanded(b, fw, fh, cfg.box_expansion)
            .map_err(|e| fail(Stage::Crop, e.to_string()))?;
        let mut image = warp(frame, &transform);
        if let (Some(spec), Some(rng)) = (&cfg.stress, rng.as_mut()) {
            image = downscale_patch_with(&image, spec, rng)
                .map_err(|e| fail(Stage::Crop, e.to_string()))?;
        }
        patches.push(PatchInput {
            frame_id: frame.id,
            index,
            detection: *b,
            image,
            transform,
        });
    }
    timings.crop_ms = ms_since(t0);

    let t0 = Instant::now();
    let stacks: Vec<HeatmapStack<f64>> = match cfg.pose_mode {
        PoseMode::Sequential => patches
            .iter()
            .map(|p| pose.estimate(p))
            .collect::<Result<_, _>>(),
        PoseMode::Batched { size } => patches
            .chunks(size.max(1))
            .map(|chunk| pose.estimate_batch(chunk))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().flatten().collect()),
    }
    .map_err(|e| fail(Stage::Pose, e.to_string()))?;
    timings.pose_ms = ms_since(t0);
    if stacks.len() != patches.len() {
        return Err(fail(
            Stage::Pose,
            format!("backend returned {} stacks for {} patches", stacks.len(), patches.len()),
        ));
    }

    let t0 = Instant::now();
    let expected = cfg.codec.shape;
    let mut persons = Vec::with_capacity(patches.len());
    for (patch, stack) in patches.iter().zip(&stacks) {
        if stack.shape() != expected {
            return Err(fail(
                Stage::Decode,
                format!("heatmap shape {:?} does not match {:?}", stack.shape(), expected),
            ));
        }
        let src = patch.transform.src_box;
        let mut keypoints = decode(stack, &patch.transform, &cfg.codec);
        // peaks inside the padding map outside the crop region
        for p in keypoints.points.iter_mut() {
            p.x = p.x.clamp(src.x, src.right());
            p.y = p.y.clamp(src.y, src.bottom());
        }
        persons.push(Person {
            bbox: patch.detection,
            keypoints,
        });
    }
    timings.decode_ms = ms_since(t0);

    Ok(PoseResult {
        frame_id: frame.id,
        persons,
        timings,
    })
}

/// Full top-down inference on one frame.
pub fn run_frame<D, P>(
    frame: &Frame,
    det: &mut D,
    pose: &mut P,
    cfg: &RunConfig,
) -> Result<PoseResult, FrameError>
where
    D: DetectorBackend + ?Sized,
    P: PoseBackend + ?Sized,
{
    let detected = detect_stage(frame, det, cfg)?;
    pose_stage(frame, detected, pose, cfg)
}

pub type FrameOutcome = Result<PoseResult, FrameError>;

fn source_error(prev_id: Option<u64>, e: PipelineError) -> FrameError {
    FrameError {
        frame_id: prev_id.map_or(0, |id| id + 1),
        stage: Stage::Source,
        message: e.to_string(),
    }
}

/// Runs every frame in order and hands each outcome to `sink` in frame
/// order. Failures are reported per frame and do not stop the stream.
pub fn run_sequence_with<I, D, P>(
    frames: I,
    det: &mut D,
    pose: &mut P,
    cfg: &RunConfig,
    mode: ExecutionMode,
    mut sink: impl FnMut(FrameOutcome),
) where
    I: Iterator<Item = Result<Frame, PipelineError>> + Send,
    D: DetectorBackend + ?Sized,
    P: PoseBackend + ?Sized,
{
    match mode {
        ExecutionMode::Sequential => {
            let mut prev = None;
            for f in frames {
                match f {
                    Ok(f) => {
                        prev = Some(f.id);
                        sink(run_frame(&f, det, pose, cfg));
                    }
                    Err(e) => sink(Err(source_error(prev, e))),
                }
            }
        }
        ExecutionMode::Pipelined => {
            type Handoff = Result<(Frame, Result<DetectedFrame, FrameError>), FrameError>;
            let (tx, rx) = mpsc::sync_channel::<Handoff>(1);
            std::thread::scope(|scope| {
                scope.spawn(move || {
                    let mut prev = None;
                    for f in frames {
                        let item = match f {
                            Ok(f) => {
                                prev = Some(f.id);
                                let d = detect_stage(&f, det, cfg);
                                Ok((f, d))
                            }
                            Err(e) => Err(source_error(prev, e)),
                        };
                        if tx.send(item).is_err() {
                            break;
                        }
                    }
                });
                for item in rx {
                    sink(match item {
                        Ok((f, Ok(d))) => pose_stage(&f, d, pose, cfg),
                        Ok((_, Err(e))) | Err(e) => Err(e),
                    });
                }
            });
        }
    }
}

/// Collecting variant of [`run_sequence_with`].
pub fn run_sequence<I, D, P>(
    frames: I,
    det: &mut D,
    pose: &mut P,
    cfg: &RunConfig,
    mode: ExecutionMode,
) -> Vec<FrameOutcome>
where
    I: Iterator<Item = Result<Frame, PipelineError>> + Send,
    D: DetectorBackend + ?Sized,
    P: PoseBackend + ?Sized,
{
    let mut out = Vec::new();
    run_sequence_with(frames, det, pose, cfg, mode, |r| out.push(r));
    out
}

/// Successful results as COCO keypoint detections, frame order kept.
pub fn results_to_detections(results: &[FrameOutcome]) -> Vec<Detection> {
    results
        .iter()
        .flatten()
        .flat_map(|r| {
            r.persons.iter().map(move |p| Detection {
                image_id: r.frame_id,
                category_id: crate::dataset::PERSON_CATEGORY_ID,
                bbox: BBox { score: None, ..p.bbox },
                score: p.score(),
                keypoints: Some(p.keypoints.clone()),
            })
        })
        .collect()
}

/// COCO keypoint results document with an extra `keypoint_scores` array.
pub fn results_document(results: &[FrameOutcome]) -> String {
    detections_to_json(&results_to_detections(results))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub frame_id: u64,
    pub persons: usize,
    #[serde(flatten)]
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSidecar {
    pub frames: Vec<TimingRecord>,
    pub errors: Vec<FrameError>,
}

pub fn timing_sidecar(results: &[FrameOutcome]) -> TimingSidecar {
    let mut frames = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(r) => frames.push(TimingRecord {
                frame_id: r.frame_id,
                persons: r.persons.len(),
                timings: r.timings,
            }),
            Err(e) => errors.push(e.clone()),
        }
    }
    TimingSidecar { frames, errors }
}

/// Patch size handed to pose backends.
pub const PATCH_SIZE: (u32, u32) = (PATCH_WIDTH, PATCH_HEIGHT);
