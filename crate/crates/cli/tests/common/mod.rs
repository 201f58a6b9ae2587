#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aeropose_core::dataset::{AnnRecord, Category, Dataset, ImageRecord, Split};
use aeropose_core::geometry::BBox;
use aeropose_core::keypoints::{Keypoint, KeypointSet, Visibility};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aeropose")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn aeropose<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

pub const FRAME_W: u32 = 640;
pub const FRAME_H: u32 = 360;

/// One synthetic source dataset: PNG frames in `frames_dir` named
/// `{label}_{k}.png` and a COCO document with people (`pedestrian`) and
/// distractor cars. Image and annotation ids start from 1 so different
/// sources collide.
pub fn write_scene(frames_dir: &Path, label: &str, images: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(frames_dir).unwrap();
    let mut d = Dataset {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![
            Category { id: 1, name: "pedestrian".into(), supercategory: None, keypoints: None, skeleton: None },
            Category { id: 3, name: "car".into(), supercategory: None, keypoints: None, skeleton: None },
        ],
        split: Split::Val,
    };
    let mut ann_id = 1;
    for k in 0..images {
        let image_id = k as u64 + 1;
        let file_name = format!("{label}_{k:03}.png");
        let mut img = RgbImage::from_pixel(FRAME_W, FRAME_H, Rgb([70, 90, 60]));
        // people stand in separate columns so boxes never overlap
        let people = rng.random_range(0..=3usize);
        for col in 0..people {
            let w = rng.random_range(60.0..100.0);
            let h = rng.random_range(130.0..200.0);
            let x = col as f64 * 200.0 + rng.random_range(10.0..(190.0 - w));
            let y = rng.random_range(5.0..(FRAME_H as f64 - h - 5.0));
            let bbox = BBox::new(x, y, w, h).unwrap();
            let kps = KeypointSet::new(std::array::from_fn(|_| {
                let v = match rng.random_range(0..10) {
                    0 => Visibility::Unlabeled,
                    1 | 2 => Visibility::Occluded,
                    _ => Visibility::Visible,
                };
                if v == Visibility::Unlabeled {
                    return Keypoint::new(0.0, 0.0, v);
                }
                Keypoint::new(
                    (x + rng.random_range(0.1..0.9) * w).round(),
                    (y + rng.random_range(0.1..0.9) * h).round(),
                    v,
                )
            }));
            for py in y as u32..(y + h) as u32 {
                for px in x as u32..(x + w) as u32 {
                    img.put_pixel(px, py, Rgb([150, 120, 100]));
                }
            }
            d.annotations.push(AnnRecord {
                id: ann_id,
                image_id,
                category_id: 1,
                bbox,
                area: (w * h * 0.8).round(),
                num_keypoints: kps.num_labeled(),
                keypoints: Some(kps),
                iscrowd: false,
            });
            ann_id += 1;
        }
        if rng.random_bool(0.5) {
            d.annotations.push(AnnRecord {
                id: ann_id,
                image_id,
                category_id: 3,
                bbox: BBox::new(600.0, 300.0, 30.0, 20.0).unwrap(),
                area: 600.0,
                keypoints: None,
                num_keypoints: 0,
                iscrowd: false,
            });
            ann_id += 1;
        }
        img.save(frames_dir.join(&file_name)).unwrap();
        d.images.push(ImageRecord {
            id: image_id,
            file_name,
            width: FRAME_W,
            height: FRAME_H,
            source_dataset: label.to_string(),
            modality: Some("rgb".into()),
        });
    }
    d
}

/// The COCO document of `d` as written by the library.
pub fn save(d: &Dataset, path: &Path) {
    d.save(path).unwrap();
}

pub fn report_ap(report_json: &Path, set: usize) -> Option<f64> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report_json).unwrap()).unwrap();
    v["sets"][set]["report"]["ap"].as_f64()
}
