//! Box arithmetic, overlap metrics and the aspect-preserving patch transform.
//!
//! All coordinates are continuous: a box `(x, y, w, h)` covers
//! `[x, x + w] × [y, y + h]` and no pixel-grid snapping is applied anywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Width of the pose-model input patch in pixels.
pub const PATCH_WIDTH: u32 = 192;
/// Height of the pose-model input patch in pixels.
pub const PATCH_HEIGHT: u32 = 256;

/// Default NWD normalisation constant in pixels.
pub const DEFAULT_NWD_CONSTANT: f64 = 12.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box extent w={w}, h={h}: extents must be finite and non-negative")]
    InvalidExtent { w: f64, h: f64 },
    #[error("box has zero extent (w={w}, h={h}); a positive extent is required")]
    DegenerateBox { w: f64, h: f64 },
    #[error("NWD constant must be positive, got {0}")]
    InvalidNwdConstant(f64),
    #[error("expansion factor must be positive, got {0}")]
    InvalidExpansion(f64),
    #[error("frame size {w}x{h} must be positive")]
    InvalidFrame { w: f64, h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box with top-left origin and an optional confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<T>,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        let valid = |v: T| v.is_finite() && v >= T::zero();
        if !valid(w) || !valid(h) || !x.is_finite() || !y.is_finite() {
            return Err(GeometryError::InvalidExtent {
                w: w.to_f64_lossy(),
                h: h.to_f64_lossy(),
            });
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            score: None,
        })
    }

    /// Builds a box from corner coordinates; corners are reordered if needed.
    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self {
            x: x0.min(x1),
            y: y0.min(y1),
            w: (x1 - x0).abs(),
            h: (y1 - y0).abs(),
            score: None,
        }
    }

    pub fn with_score(mut self, score: T) -> Self {
        self.score = Some(score);
        self
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn center(&self) -> Point<T> {
        let two = T::lit(2.0);
        Point::new(self.x + self.w / two, self.y + self.h / two)
    }

    pub fn has_positive_extent(&self) -> bool {
        self.w > T::zero() && self.h > T::zero()
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Scales position and extent about the origin.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
            score: self.score,
        }
    }

    /// Grows the box about its center by `factor` in both dimensions.
    pub fn expanded(&self, factor: T) -> Self {
        let c = self.center();
        let w = self.w * factor;
        let h = self.h * factor;
        let two = T::lit(2.0);
        Self {
            x: c.x - w / two,
            y: c.y - h / two,
            w,
            h,
            score: self.score,
        }
    }

    pub fn contains(&self, p: Point<T>) -> bool {
        p.x >= self.x && p.x <= self.right() && p.y >= self.y && p.y <= self.bottom()
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(T::zero());
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(T::zero());
        iw * ih
    }

    /// Smallest box containing both inputs.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.right().max(other.right()),
            self.bottom().max(other.bottom()),
        )
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, in `[-1, 1]`.
pub fn giou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing(b).area();
    let overlap = if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    };
    if enclosing <= T::zero() {
        return overlap;
    }
    overlap - (enclosing - union) / enclosing
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NwdConfig<T> {
    pub c: T,
}

impl<T: Scalar> NwdConfig<T> {
    pub fn new(c: T) -> Result<Self, GeometryError> {
        if !(c > T::zero()) || !c.is_finite() {
            return Err(GeometryError::InvalidNwdConstant(c.to_f64_lossy()));
        }
        Ok(Self { c })
    }
}

impl<T: Scalar> Default for NwdConfig<T> {
    fn default() -> Self {
        Self {
            c: T::lit(DEFAULT_NWD_CONSTANT),
        }
    }
}

/// Normalized Wasserstein distance similarity, in `(0, 1]`.
///
/// Each box is modelled as a 2D Gaussian centred on the box with
/// half-extents as standard deviations; for such Gaussians the
/// 2-Wasserstein distance reduces to the Euclidean norm of
/// `[cx, cy, w/2, h/2]` differences.
pub fn nwd<T: Scalar>(a: &BBox<T>, b: &BBox<T>, cfg: &NwdConfig<T>) -> Result<T, GeometryError> {
    for bx in [a, b] {
        if !bx.has_positive_extent() {
            return Err(GeometryError::DegenerateBox {
                w: bx.w.to_f64_lossy(),
                h: bx.h.to_f64_lossy(),
            });
        }
    }
    let two = T::lit(2.0);
    let (ca, cb) = (a.center(), b.center());
    let diff = [
        ca.x - cb.x,
        ca.y - cb.y,
        a.w / two - b.w / two,
        a.h / two - b.h / two,
    ];
    let w2 = diff.iter().fold(T::zero(), |acc, &d| acc + d * d).sqrt();
    Ok((-w2 / cfg.c).exp())
}

/// Intersection of `b` with the frame `[0, frame_w] × [0, frame_h]`.
///
/// A box entirely outside the frame collapses to a zero-extent box on the
/// nearest frame edge.
pub fn clip_box<T: Scalar>(b: &BBox<T>, frame_w: T, frame_h: T) -> BBox<T> {
    let clamp = |v: T, hi: T| v.max(T::zero()).min(hi);
    let x0 = clamp(b.x, frame_w);
    let y0 = clamp(b.y, frame_h);
    let x1 = clamp(b.right(), frame_w).max(x0);
    let y1 = clamp(b.bottom(), frame_h).max(y0);
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
        score: b.score,
    }
}

/// Uniform scale + centred padding that fits `src_box` into a
/// `dst_w × dst_h` canvas without distortion.
///
/// Forward map: `patch = (image - src_origin) * scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchTransform<T> {
    pub scale: T,
    pub pad_x: T,
    pub pad_y: T,
    pub src_box: BBox<T>,
    pub dst_w: T,
    pub dst_h: T,
}

impl<T: Scalar> PatchTransform<T> {
    /// Fits `src` into the destination canvas, larger relative side first.
    pub fn fit(src: BBox<T>, dst_w: T, dst_h: T) -> Result<Self, GeometryError> {
        if !src.has_positive_extent() {
            return Err(GeometryError::DegenerateBox {
                w: src.w.to_f64_lossy(),
                h: src.h.to_f64_lossy(),
            });
        }
        let scale = (dst_w / src.w).min(dst_h / src.h);
        let two = T::lit(2.0);
        let pad_x = ((dst_w - src.w * scale) / two).max(T::zero());
        let pad_y = ((dst_h - src.h * scale) / two).max(T::zero());
        Ok(Self {
            scale,
            pad_x,
            pad_y,
            src_box: BBox { score: None, ..src },
            dst_w,
            dst_h,
        })
    }

    pub fn image_to_patch(&self, p: Point<T>) -> Point<T> {
        Point::new(
            (p.x - self.src_box.x) * self.scale + self.pad_x,
            (p.y - self.src_box.y) * self.scale + self.pad_y,
        )
    }

    pub fn patch_to_image(&self, p: Point<T>) -> Point<T> {
        Point::new(
            self.src_box.x + (p.x - self.pad_x) / self.scale,
            self.src_box.y + (p.y - self.pad_y) / self.scale,
        )
    }

    pub fn box_to_patch(&self, b: &BBox<T>) -> BBox<T> {
        let tl = self.image_to_patch(Point::new(b.x, b.y));
        BBox {
            x: tl.x,
            y: tl.y,
            w: b.w * self.scale,
            h: b.h * self.scale,
            score: b.score,
        }
    }

    pub fn box_to_image(&self, b: &BBox<T>) -> BBox<T> {
        let tl = self.patch_to_image(Point::new(b.x, b.y));
        BBox {
            x: tl.x,
            y: tl.y,
            w: b.w / self.scale,
            h: b.h / self.scale,
            score: b.score,
        }
    }

    /// Row-major 2×3 affine matrix of the image → patch map.
    pub fn to_affine(&self) -> [T; 6] {
        [
            self.scale,
            T::zero(),
            self.pad_x - self.src_box.x * self.scale,
            T::zero(),
            self.scale,
            self.pad_y - self.src_box.y * self.scale,
        ]
    }
}

/// Crop transform for a detection: scale = `min(192 / w, 256 / h)`, centred
/// in the 192×256 patch with symmetric padding.
pub fn make_patch_transform<T: Scalar>(
    det: &BBox<T>,
    frame_w: T,
    frame_h: T,
) -> Result<PatchTransform<T>, GeometryError> {
    make_patch_transform_expanded(det, frame_w, frame_h, T::one())
}

/// Like [`make_patch_transform`] but grows the detection about its centre by
/// `expansion` first. The source region is clipped to the frame.
pub fn make_patch_transform_expanded<T: Scalar>(
    det: &BBox<T>,
    frame_w: T,
    frame_h: T,
    expansion: T,
) -> Result<PatchTransform<T>, GeometryError> {
    if !(expansion > T::zero()) || !expansion.is_finite() {
        return Err(GeometryError::InvalidExpansion(expansion.to_f64_lossy()));
    }
    if !(frame_w > T::zero() && frame_h > T::zero()) {
        return Err(GeometryError::InvalidFrame {
            w: frame_w.to_f64_lossy(),
            h: frame_h.to_f64_lossy(),
        });
    }
    if !det.has_positive_extent() {
        return Err(GeometryError::DegenerateBox {
            w: det.w.to_f64_lossy(),
            h: det.h.to_f64_lossy(),
        });
    }
    let src = clip_box(&det.expanded(expansion), frame_w, frame_h);
    PatchTransform::fit(
        src,
        T::from_u32(PATCH_WIDTH).unwrap(),
        T::from_u32(PATCH_HEIGHT).unwrap(),
    )
}

/// Letterbox of a whole frame into a `side × side` canvas.
pub fn letterbox_transform<T: Scalar>(
    frame_w: T,
    frame_h: T,
    side: T,
) -> Result<PatchTransform<T>, GeometryError> {
    if !(frame_w > T::zero() && frame_h > T::zero()) {
        return Err(GeometryError::InvalidFrame {
            w: frame_w.to_f64_lossy(),
            h: frame_h.to_f64_lossy(),
        });
    }
    PatchTransform::fit(
        BBox {
            x: T::zero(),
            y: T::zero(),
            w: frame_w,
            h: frame_h,
            score: None,
        },
        side,
        side,
    )
}
