//! The 17-point COCO body keypoint layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};
use crate::scalar::Scalar;

pub const NUM_KEYPOINTS: usize = 17;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Nose, eyes and ears.
pub const FACIAL_KEYPOINTS: Range<usize> = 0..5;
/// Shoulders down to ankles.
pub const BODY_KEYPOINTS: Range<usize> = 5..NUM_KEYPOINTS;

/// COCO limb connectivity, zero-based.
pub const SKELETON: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

/// Standard COCO per-keypoint sigmas. The OKS tolerance constant for
/// keypoint `i` is `2 * COCO_SIGMAS[i]`.
pub const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointError {
    #[error("expected {expected} keypoint values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("keypoint {index} has visibility {value}; expected 0, 1 or 2")]
    BadVisibility { index: usize, value: f64 },
    #[error("keypoint {index} has a non-finite coordinate")]
    NonFinite { index: usize },
}

/// COCO visibility flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[repr(u8)]
pub enum Visibility {
    #[default]
    Unlabeled = 0,
    Occluded = 1,
    Visible = 2,
}

impl Visibility {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Unlabeled),
            1 => Some(Self::Occluded),
            2 => Some(Self::Visible),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// `v > 0`.
    pub fn is_labeled(self) -> bool {
        self != Self::Unlabeled
    }
}

impl Serialize for Visibility {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for Visibility {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        Self::from_code(code)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid visibility flag {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint<T> {
    pub x: T,
    pub y: T,
    pub v: Visibility,
}

impl<T: Scalar> Keypoint<T> {
    pub fn new(x: T, y: T, v: Visibility) -> Self {
        Self { x, y, v }
    }

    pub fn position(&self) -> Point<T> {
        Point::new(self.x, self.y)
    }
}

/// Exactly 17 keypoints in COCO order, with optional per-point confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct KeypointSet<T> {
    pub points: [Keypoint<T>; NUM_KEYPOINTS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<[T; NUM_KEYPOINTS]>,
}

impl<T: Scalar> Default for KeypointSet<T> {
    fn default() -> Self {
        Self {
            points: [Keypoint::default(); NUM_KEYPOINTS],
            confidences: None,
        }
    }
}

impl<T: Scalar> KeypointSet<T> {
    pub fn new(points: [Keypoint<T>; NUM_KEYPOINTS]) -> Self {
        Self {
            points,
            confidences: None,
        }
    }

    /// Parses a flat `[x1, y1, v1, ..., x17, y17, v17]` array.
    pub fn from_flat(values: &[f64]) -> Result<Self, KeypointError> {
        if values.len() != 3 * NUM_KEYPOINTS {
            return Err(KeypointError::WrongLength {
                expected: 3 * NUM_KEYPOINTS,
                got: values.len(),
            });
        }
        let mut set = Self::default();
        for (index, chunk) in values.chunks_exact(3).enumerate() {
            let (x, y, v) = (chunk[0], chunk[1], chunk[2]);
            if !x.is_finite() || !y.is_finite() {
                return Err(KeypointError::NonFinite { index });
            }
            let vis = if v.fract() == 0.0 && (0.0..=2.0).contains(&v) {
                Visibility::from_code(v as u8)
            } else {
                None
            };
            let v = vis.ok_or(KeypointError::BadVisibility { index, value: v })?;
            set.points[index] = Keypoint::new(T::lit(x), T::lit(y), v);
        }
        Ok(set)
    }

    /// Flat `[x, y, v]` triplets; the inverse of [`KeypointSet::from_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|p| [p.x.to_f64_lossy(), p.y.to_f64_lossy(), p.v.code() as f64])
            .collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.points.iter().filter(|p| p.v.is_labeled()).count()
    }

    pub fn labeled_mask(&self) -> [bool; NUM_KEYPOINTS] {
        std::array::from_fn(|i| self.points[i].v.is_labeled())
    }

    /// Tight box around labeled points, `None` if nothing is labeled.
    pub fn labeled_extent(&self) -> Option<BBox<T>> {
        let mut it = self.points.iter().filter(|p| p.v.is_labeled());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in it {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Some(BBox::from_corners(x0, y0, x1, y1))
    }

    pub fn map_points(&self, f: impl Fn(Point<T>) -> Point<T>) -> Self {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            let q = f(p.position());
            p.x = q.x;
            p.y = q.y;
        }
        out
    }
}
