//! Deterministic in-process backends for tests, demos and benchmarks.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use crate::dataset::Dataset;
use crate::geometry::{iou, BBox, Point};
use crate::heatmap::{encode, CodecConfig, HeatmapStack};
use crate::keypoints::KeypointSet;

use super::backend::{BackendError, DetectorBackend, DetectorInput, PatchInput, PoseBackend};
use super::DEFAULT_DETECTOR_INPUT;

/// One annotated person: box and optional keypoints in frame coordinates.
pub type AnnotatedPerson = (BBox<f64>, Option<KeypointSet<f64>>);

/// Annotated people per image.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthPeople {
    pub by_frame: HashMap<u64, Vec<AnnotatedPerson>>,
}

impl GroundTruthPeople {
    /// Non-crowd annotations keyed by image id.
    pub fn from_dataset(d: &Dataset) -> Self {
        let mut by_frame: HashMap<u64, Vec<_>> = HashMap::new();
        for a in d.annotations.iter().filter(|a| !a.iscrowd) {
            by_frame
                .entry(a.image_id)
                .or_default()
                .push((a.bbox, a.keypoints.clone()));
        }
        Self { by_frame }
    }

    pub fn boxes(&self, score: f64) -> HashMap<u64, Vec<BBox<f64>>> {
        self.by_frame
            .iter()
            .map(|(&id, people)| (id, people.iter().map(|(b, _)| b.with_score(score)).collect()))
            .collect()
    }
}

/// Returns scripted boxes (frame coordinates) for each frame id.
#[derive(Debug, Clone)]
pub struct MockDetector {
    boxes: HashMap<u64, Vec<BBox<f64>>>,
    input_size: u32,
    fail_on: HashSet<u64>,
    delay: Option<Duration>,
}

impl MockDetector {
    pub fn new(boxes: HashMap<u64, Vec<BBox<f64>>>) -> Self {
        Self {
            boxes,
            input_size: DEFAULT_DETECTOR_INPUT,
            fail_on: HashSet::new(),
            delay: None,
        }
    }

    /// Emits every non-crowd ground-truth box with the given score.
    pub fn from_dataset(d: &Dataset, score: f64) -> Self {
        Self::new(GroundTruthPeople::from_dataset(d).boxes(score))
    }

    pub fn with_input_size(mut self, side: u32) -> Self {
        self.input_size = side;
        self
    }

    pub fn failing_on(mut self, frames: impl IntoIterator<Item = u64>) -> Self {
        self.fail_on.extend(frames);
        self
    }

    /// Sleeps for `delay` on every call.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }
}

impl DetectorBackend for MockDetector {
    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn detect(&mut self, input: &DetectorInput) -> Result<Vec<BBox<f64>>, BackendError> {
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        if self.fail_on.contains(&input.frame_id) {
            return Err(BackendError::Failed(format!(
                "mock detector failure on frame {}",
                input.frame_id
            )));
        }
        Ok(self
            .boxes
            .get(&input.frame_id)
            .map(|bs| bs.iter().map(|b| input.transform.box_to_patch(b)).collect())
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
enum PoseSource {
    /// Keypoints in patch coordinates, encoded on each call.
    Fixed(Box<KeypointSet<f64>>),
    Stack(HeatmapStack<f64>),
    /// Encodes the ground-truth person overlapping the detection most.
    Oracle(GroundTruthPeople),
}

/// Pose backend producing heatmaps from known keypoints.
#[derive(Debug, Clone)]
pub struct MockPose {
    source: PoseSource,
    codec: CodecConfig<f64>,
    fail_on: HashSet<u64>,
    delay: Option<Duration>,
    record: Option<Vec<Vec<u8>>>,
}

impl MockPose {
    fn with_source(source: PoseSource) -> Self {
        Self {
            source,
            codec: CodecConfig::default(),
            fail_on: HashSet::new(),
            delay: None,
            record: None,
        }
    }

    /// Same patch-space keypoints for every patch.
    pub fn fixed(kps: KeypointSet<f64>) -> Self {
        Self::with_source(PoseSource::Fixed(Box::new(kps)))
    }

    /// Same heatmap stack for every patch.
    pub fn stack(stack: HeatmapStack<f64>) -> Self {
        Self::with_source(PoseSource::Stack(stack))
    }

    pub fn oracle(people: GroundTruthPeople) -> Self {
        Self::with_source(PoseSource::Oracle(people))
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        Self::oracle(GroundTruthPeople::from_dataset(d))
    }

    pub fn with_codec(mut self, codec: CodecConfig<f64>) -> Self {
        self.codec = codec;
        self
    }

    pub fn failing_on(mut self, frames: impl IntoIterator<Item = u64>) -> Self {
        self.fail_on.extend(frames);
        self
    }

    /// Sleeps for `delay` per patch.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    /// Keeps a copy of every patch received.
    pub fn recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    pub fn recorded(&self) -> Vec<Vec<u8>> {
        self.record.clone().unwrap_or_default()
    }
}

impl PoseBackend for MockPose {
    fn estimate(&mut self, patch: &PatchInput) -> Result<HeatmapStack<f64>, BackendError> {
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        if self.fail_on.contains(&patch.frame_id) {
            return Err(BackendError::Failed(format!(
                "mock pose failure on frame {}",
                patch.frame_id
            )));
        }
        if let Some(r) = self.record.as_mut() {
            r.push(patch.image.as_raw().clone());
        }
        Ok(match &self.source {
            PoseSource::Fixed(k) => encode(k, &self.codec),
            PoseSource::Stack(s) => s.clone(),
            PoseSource::Oracle(people) => {
                let best = people.by_frame.get(&patch.frame_id).and_then(|ps| {
                    ps.iter()
                        .map(|(b, k)| (iou(b, &patch.detection), k))
                        .filter(|(o, _)| *o > 0.0)
                        .fold(None, |best: Option<(f64, _)>, cur| match best {
                            Some(b) if b.0 >= cur.0 => Some(b),
                            _ => Some(cur),
                        })
                });
                match best.and_then(|(_, k)| k.as_ref()) {
                    Some(k) => {
                        let in_patch = k.map_points(|p| patch.transform.image_to_patch(Point::new(p.x, p.y)));
                        encode(&in_patch, &self.codec)
                    }
                    None => HeatmapStack::zeros(self.codec.shape),
                }
            }
        })
    }
}
