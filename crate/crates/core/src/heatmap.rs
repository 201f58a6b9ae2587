//! Gaussian heatmap targets, the MSE heatmap objective, and peak decoding.
//!
//! Heatmap cell `(row, col)` is anchored at patch point
//! `(col * stride, row * stride)`; encoding places the Gaussian mean at
//! `keypoint / stride` and decoding maps a (refined) cell coordinate back by
//! multiplying with the stride. Both directions use the same anchor so an
//! encode/decode round trip is unbiased.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PatchTransform, Point, PATCH_HEIGHT, PATCH_WIDTH};
use crate::keypoints::{Keypoint, KeypointSet, Visibility, NUM_KEYPOINTS};
use crate::scalar::Scalar;

/// Default heatmap stride in patch pixels per cell.
pub const DEFAULT_STRIDE: u32 = 4;
/// Default keypoint confidence threshold.
pub const DEFAULT_KP_CONF_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("heatmap dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("expected {expected} heatmap channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(String),
    #[error("heatmap payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed heatmap grid layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: u32,
}

impl Default for HeatmapShape {
    /// 17 × 64 × 48 at stride 4, i.e. a quarter-resolution 192×256 patch.
    fn default() -> Self {
        Self {
            channels: NUM_KEYPOINTS,
            height: (PATCH_HEIGHT / DEFAULT_STRIDE) as usize,
            width: (PATCH_WIDTH / DEFAULT_STRIDE) as usize,
            stride: DEFAULT_STRIDE,
        }
    }
}

/// Dense channel-major, row-major stack of confidence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack<T> {
    shape: HeatmapShape,
    data: Vec<T>,
}

const HEADER_LEN: usize = 16;

impl<T: Scalar> HeatmapStack<T> {
    pub fn zeros(shape: HeatmapShape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.channels * shape.height * shape.width],
        }
    }

    pub fn from_vec(shape: HeatmapShape, data: Vec<T>) -> Result<Self, CodecError> {
        let expected = shape.channels * shape.height * shape.width;
        if data.len() != expected {
            return Err(CodecError::Payload(format!(
                "expected {expected} values for {shape:?}, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> HeatmapShape {
        self.shape
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.shape.channels, self.shape.height, self.shape.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.height * self.shape.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.height * self.shape.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.channel(c)[row * self.shape.width + col]
    }

    /// Wire format: little-endian `u32` channels, height, width, stride,
    /// then `channels * height * width` little-endian `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        for v in [
            self.shape.channels as u32,
            self.shape.height as u32,
            self.shape.width as u32,
            self.shape.stride,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Payload(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let shape = HeatmapShape {
            channels: word(0) as usize,
            height: word(1) as usize,
            width: word(2) as usize,
            stride: word(3),
        };
        if shape.stride == 0 {
            return Err(CodecError::Payload("stride must be positive".into()));
        }
        let n = shape
            .channels
            .checked_mul(shape.height)
            .and_then(|v| v.checked_mul(shape.width))
            .ok_or_else(|| CodecError::Payload("dimensions overflow".into()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(CodecError::Payload(format!(
                "expected {} payload bytes for {shape:?}, got {}",
                4 * n,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CodecError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CodecError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let n: usize = header
            .chunks_exact(4)
            .take(3)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .product();
        let mut bytes = header.to_vec();
        bytes.resize(HEADER_LEN + 4 * n, 0);
        r.read_exact(&mut bytes[HEADER_LEN..])?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig<T> {
    /// Gaussian standard deviation of encoded targets, in cells.
    pub sigma: T,
    /// Peak NMS window radius in cells.
    pub peak_window: usize,
    pub kp_conf_threshold: T,
    /// Quarter-cell shift toward the larger neighbour.
    pub subpixel: bool,
    pub shape: HeatmapShape,
}

impl<T: Scalar> Default for CodecConfig<T> {
    fn default() -> Self {
        Self {
            sigma: T::lit(2.0),
            peak_window: 1,
            kp_conf_threshold: T::lit(DEFAULT_KP_CONF_THRESHOLD),
            subpixel: true,
            shape: HeatmapShape::default(),
        }
    }
}

impl<T: Scalar> CodecConfig<T> {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.sigma > T::zero()) || !self.sigma.is_finite() {
            return Err(CodecError::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.peak_window < 1 {
            return Err(CodecError::InvalidConfig("peak_window must be >= 1".into()));
        }
        if !(self.kp_conf_threshold >= T::zero() && self.kp_conf_threshold <= T::one()) {
            return Err(CodecError::InvalidConfig(format!(
                "keypoint threshold must lie in [0, 1], got {}",
                self.kp_conf_threshold
            )));
        }
        let s = self.shape;
        if s.channels != NUM_KEYPOINTS || s.height == 0 || s.width == 0 || s.stride == 0 {
            return Err(CodecError::InvalidConfig(format!("bad heatmap shape {s:?}")));
        }
        Ok(())
    }
}

/// Renders Gaussian targets for keypoints given in patch coordinates.
///
/// Unlabeled keypoints (`v = 0`) produce an all-zero channel.
pub fn encode<T: Scalar>(kps: &KeypointSet<T>, cfg: &CodecConfig<T>) -> HeatmapStack<T> {
    let shape = cfg.shape;
    let mut stack = HeatmapStack::zeros(shape);
    let stride = T::from_u32(shape.stride).unwrap();
    let denom = T::lit(2.0) * cfg.sigma * cfg.sigma;
    for (c, kp) in kps.points.iter().enumerate().take(shape.channels) {
        if !kp.v.is_labeled() {
            continue;
        }
        let (mx, my) = (kp.x / stride, kp.y / stride);
        let gx: Vec<T> = (0..shape.width)
            .map(|j| {
                let d = T::from_usize_lossy(j) - mx;
                (-(d * d) / denom).exp()
            })
            .collect();
        let channel = stack.channel_mut(c);
        for i in 0..shape.height {
            let d = T::from_usize_lossy(i) - my;
            let gy = (-(d * d) / denom).exp();
            let row = &mut channel[i * shape.width..(i + 1) * shape.width];
            for (cell, &g) in row.iter_mut().zip(&gx) {
                *cell = gy * g;
            }
        }
    }
    stack
}

/// Mean squared error over the channels selected by `vis_mask`.
///
/// Returns 0 when no channel is selected.
pub fn mse_loss<T: Scalar>(
    pred: &HeatmapStack<T>,
    gt: &HeatmapStack<T>,
    vis_mask: &[bool; NUM_KEYPOINTS],
) -> Result<T, CodecError> {
    if pred.dims() != gt.dims() {
        return Err(CodecError::DimensionMismatch {
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    if pred.shape.channels != NUM_KEYPOINTS {
        return Err(CodecError::ChannelCount {
            expected: NUM_KEYPOINTS,
            got: pred.shape.channels,
        });
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (c, _) in vis_mask.iter().enumerate().filter(|(_, &m)| m) {
        for (&p, &g) in pred.channel(c).iter().zip(gt.channel(c)) {
            let d = p - g;
            sum += d * d;
        }
        count += pred.channel(c).len();
    }
    if count == 0 {
        return Ok(T::zero());
    }
    Ok(sum / T::from_usize_lossy(count))
}

/// Local maxima of one channel: cells not exceeded by any cell within
/// `window` (Chebyshev radius). Plateaus keep only their first cell in
/// row-major order. Returned as `(row, col, value)`, strongest first.
pub fn find_peaks<T: Scalar>(
    channel: &[T],
    height: usize,
    width: usize,
    window: usize,
) -> Vec<(usize, usize, T)> {
    let mut peaks = Vec::new();
    for row in 0..height {
        for col in 0..width {
            let v = channel[row * width + col];
            let r0 = row.saturating_sub(window);
            let c0 = col.saturating_sub(window);
            let r1 = (row + window).min(height - 1);
            let c1 = (col + window).min(width - 1);
            let mut is_peak = true;
            'scan: for r in r0..=r1 {
                for c in c0..=c1 {
                    let n = channel[r * width + c];
                    let earlier = (r, c) < (row, col);
                    if n > v || (earlier && n == v) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push((row, col, v));
            }
        }
    }
    // stable: equal values stay in row-major order
    peaks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    peaks
}

fn refine_offset<T: Scalar>(before: Option<T>, after: Option<T>) -> T {
    match (before, after) {
        (Some(b), Some(a)) if a > b => T::lit(0.25),
        (Some(b), Some(a)) if b > a => T::lit(-0.25),
        _ => T::zero(),
    }
}

/// Decodes keypoints in patch coordinates.
pub fn decode_patch<T: Scalar>(hm: &HeatmapStack<T>, cfg: &CodecConfig<T>) -> KeypointSet<T> {
    let HeatmapShape {
        height,
        width,
        stride,
        ..
    } = hm.shape();
    let stride = T::from_u32(stride).unwrap();
    let mut out = KeypointSet::default();
    let mut confidences = [T::zero(); NUM_KEYPOINTS];
    let slots = out.points.iter_mut().zip(confidences.iter_mut());
    for (c, (point, conf)) in slots.enumerate().take(hm.shape().channels) {
        let channel = hm.channel(c);
        let (row, col, peak) = find_peaks(channel, height, width, cfg.peak_window)
            .first()
            .copied()
            .unwrap_or((0, 0, channel[0]));
        let mut fx = T::from_usize_lossy(col);
        let mut fy = T::from_usize_lossy(row);
        if cfg.subpixel {
            let at = |r: usize, c: usize| channel[r * width + c];
            fx += refine_offset(
                col.checked_sub(1).map(|c| at(row, c)),
                (col + 1 < width).then(|| at(row, col + 1)),
            );
            fy += refine_offset(
                row.checked_sub(1).map(|r| at(r, col)),
                (row + 1 < height).then(|| at(row + 1, col)),
            );
        }
        let v = if peak >= cfg.kp_conf_threshold {
            Visibility::Visible
        } else {
            Visibility::Unlabeled
        };
        *point = Keypoint::new(fx * stride, fy * stride, v);
        *conf = peak;
    }
    out.confidences = Some(confidences);
    out
}

/// Decodes keypoints and maps them into image coordinates through `t`.
///
/// Below-threshold points keep their raw coordinates with `v = 0`.
pub fn decode<T: Scalar>(
    hm: &HeatmapStack<T>,
    t: &PatchTransform<T>,
    cfg: &CodecConfig<T>,
) -> KeypointSet<T> {
    decode_patch(hm, cfg).map_points(|p| t.patch_to_image(Point::new(p.x, p.y)))
}
