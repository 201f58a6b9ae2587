//! Skeleton overlays: detection boxes, COCO limbs and keypoint markers.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use thiserror::Error;

use crate::keypoints::SKELETON;
use crate::pipeline::{Frame, PoseResult};

pub const BOX_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const LIMB_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const VISIBLE_COLOR: Rgb<u8> = Rgb([0, 255, 255]);
/// Keypoints reported with `v = 0`.
pub const INVISIBLE_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const MARKER_RADIUS: i64 = 3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("result for frame {result} does not belong to frame {frame}")]
    FrameMismatch { frame: u64, result: u64 },
    #[error("{path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line, two pixels thick.
pub fn draw_line(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), c: Rgb<u8>) {
    let (mut x0, mut y0) = (from.0.round() as i64, from.1.round() as i64);
    let (x1, y1) = (to.0.round() as i64, to.1.round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        put(img, x0 + 1, y0, c);
        put(img, x0, y0 + 1, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

pub fn draw_disc(img: &mut RgbImage, center: (f64, f64), radius: i64, c: Rgb<u8>) {
    let (cx, cy) = (center.0.round() as i64, center.1.round() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

pub fn draw_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
    draw_line(img, (x0, y0), (x1, y0), c);
    draw_line(img, (x1, y0), (x1, y1), c);
    draw_line(img, (x1, y1), (x0, y1), c);
    draw_line(img, (x0, y1), (x0, y0), c);
}

/// Draws every person of `r` onto `img`: box, limbs between labeled points,
/// then markers (visible and `v = 0` in distinct colours).
pub fn draw_pose(img: &mut RgbImage, r: &PoseResult) {
    for p in &r.persons {
        let b = &p.bbox;
        draw_rect(img, b.x, b.y, b.right(), b.bottom(), BOX_COLOR);
        let pts = &p.keypoints.points;
        for (a, c) in SKELETON {
            if pts[a].v.is_labeled() && pts[c].v.is_labeled() {
                draw_line(img, (pts[a].x, pts[a].y), (pts[c].x, pts[c].y), LIMB_COLOR);
            }
        }
        for k in pts {
            let color = if k.v.is_labeled() {
                VISIBLE_COLOR
            } else {
                INVISIBLE_COLOR
            };
            draw_disc(img, (k.x, k.y), MARKER_RADIUS, color);
        }
    }
}

/// Renders `r` over `f` and writes a PNG to `out`.
pub fn render_overlay(f: &Frame, r: &PoseResult, out: &Path) -> Result<(), RenderError> {
    if f.id != r.frame_id {
        return Err(RenderError::FrameMismatch {
            frame: f.id,
            result: r.frame_id,
        });
    }
    let mut img = f.to_image();
    draw_pose(&mut img, r);
    img.save_with_format(out, ImageFormat::Png)
        .map_err(|source| RenderError::Write {
            path: out.display().to_string(),
            source,
        })
}
