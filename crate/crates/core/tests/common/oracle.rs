//! Brute-force reference evaluator and random instance generator.
//!
//! Written independently of the library evaluator: similarities, matching
//! and precision/recall are recomputed from first principles with plain
//! loops, and interpolated precision at recall `r` is taken directly as the
//! best precision over every ranked cutoff whose recall reaches `r`.
#![allow(dead_code)]

use aeropose_core::dataset::{AnnRecord, Category, Dataset, ImageRecord, Split};
use aeropose_core::eval::{Detection, EvalConfig};
use aeropose_core::geometry::BBox;
use aeropose_core::keypoints::{Keypoint, KeypointSet, Visibility};
use rand::Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OracleMode {
    Boxes,
    Keypoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleArea {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
}

fn corners(b: &BBox<f64>) -> (f64, f64, f64, f64) {
    (b.x, b.y, b.x + b.w, b.y + b.h)
}

fn overlap(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    w * h
}

pub fn oracle_iou(det: &BBox<f64>, gt: &BBox<f64>, crowd: bool) -> f64 {
    let inter = overlap(det, gt);
    let denom = if crowd {
        det.w * det.h
    } else {
        det.w * det.h + gt.w * gt.h - inter
    };
    if denom > 0.0 {
        inter / denom
    } else {
        0.0
    }
}

#[allow(clippy::needless_range_loop)]
pub fn oracle_oks(gt: &AnnRecord, pred: &KeypointSet<f64>, k: &[f64; 17]) -> Option<f64> {
    let g = gt.keypoints.as_ref()?;
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..17 {
        if g.points[i].v == Visibility::Unlabeled {
            continue;
        }
        let dx = pred.points[i].x - g.points[i].x;
        let dy = pred.points[i].y - g.points[i].y;
        let e = (dx * dx + dy * dy) / (2.0 * (gt.area + f64::EPSILON) * k[i] * k[i]);
        sum += (-e).exp();
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

fn similarity(det: &Detection, gt: &AnnRecord, mode: OracleMode, cfg: &EvalConfig) -> Option<f64> {
    match mode {
        OracleMode::Boxes => Some(oracle_iou(&det.bbox, &gt.bbox, gt.iscrowd)),
        OracleMode::Keypoints => oracle_oks(gt, det.keypoints.as_ref()?, &cfg.kp_k),
    }
}

/// Exhaustive greedy assignment: each detection, best score first, takes the
/// candidate minimizing (ignored, -similarity, index) among ground truth that
/// is free (or crowd) and reaches the threshold.
pub fn oracle_match(
    sims: &[Vec<Option<f64>>],
    ignore: &[bool],
    crowd: &[bool],
    threshold: f64,
) -> Vec<Option<usize>> {
    let t = threshold.min(1.0 - 1e-10);
    let mut taken = vec![false; ignore.len()];
    let mut out = Vec::new();
    for row in sims {
        let mut best: Option<(bool, f64, usize)> = None;
        for g in 0..ignore.len() {
            if taken[g] && !crowd[g] {
                continue;
            }
            let Some(s) = row[g] else { continue };
            if s < t {
                continue;
            }
            let key = (ignore[g], s, g);
            let better = match best {
                None => true,
                Some((bi, bs, bg)) => {
                    (key.0 as u8, -key.1, key.2) < (bi as u8, -bs, bg)
                }
            };
            if better {
                best = Some(key);
            }
        }
        if let Some((_, _, g)) = best {
            taken[g] = true;
        }
        out.push(best.map(|b| b.2));
    }
    out
}

/// Interpolated AP and final recall from labels `(score, image_id, rank, is_tp)`
/// where ignored detections have already been removed.
pub fn oracle_curve(mut labels: Vec<(f64, u64, usize, bool)>, n_gt: usize, recall_points: usize) -> Option<(f64, f64)> {
    if n_gt == 0 {
        return None;
    }
    labels.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut cut = Vec::new();
    for k in 1..=labels.len() {
        let tp = labels[..k].iter().filter(|l| l.3).count();
        let fp = k - tp;
        let precision = tp as f64 / (tp + fp) as f64;
        cut.push((tp as f64 / n_gt as f64, precision));
    }
    let mut total = 0.0;
    for i in 0..recall_points {
        let r = i as f64 / (recall_points - 1) as f64;
        let best = cut
            .iter()
            .filter(|(rc, _)| *rc >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    let recall = labels.iter().filter(|l| l.3).count() as f64 / n_gt as f64;
    Some((total / recall_points as f64, recall))
}

fn mean(v: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// AP/AR per configured area range.
pub fn oracle_evaluate(d: &Dataset, dets: &[Detection], cfg: &EvalConfig, mode: OracleMode) -> Vec<OracleArea> {
    let thresholds = match mode {
        OracleMode::Boxes => &cfg.iou_thresholds,
        OracleMode::Keypoints => &cfg.oks_thresholds,
    };
    let mut image_ids: Vec<u64> = d.images.iter().map(|i| i.id).collect();
    image_ids.sort();
    let mut out = Vec::new();
    for range in &cfg.area_ranges {
        let inside = |a: f64| a >= range.lo && a <= range.hi;
        let mut aps = Vec::new();
        let mut ars = Vec::new();
        for &t in thresholds {
            let mut labels = Vec::new();
            let mut n_gt = 0;
            for &img in &image_ids {
                let gts: Vec<&AnnRecord> = d.annotations.iter().filter(|a| a.image_id == img).collect();
                let mut mine: Vec<(usize, &Detection)> =
                    dets.iter().filter(|x| x.image_id == img).enumerate().collect();
                // stable: equal scores keep input order
                mine.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
                mine.truncate(cfg.max_dets);
                let ignore: Vec<bool> = gts
                    .iter()
                    .map(|g| {
                        g.iscrowd
                            || !inside(g.area)
                            || (mode == OracleMode::Keypoints && g.num_keypoints == 0)
                    })
                    .collect();
                let crowd: Vec<bool> = gts.iter().map(|g| g.iscrowd).collect();
                n_gt += ignore.iter().filter(|i| !**i).count();
                let sims: Vec<Vec<Option<f64>>> = mine
                    .iter()
                    .map(|(_, det)| gts.iter().map(|g| similarity(det, g, mode, cfg)).collect())
                    .collect();
                let m = oracle_match(&sims, &ignore, &crowd, t);
                for (rank, ((_, det), g)) in mine.iter().zip(&m).enumerate() {
                    let ignored = match g {
                        Some(g) => ignore[*g],
                        None => !inside(det.bbox.w * det.bbox.h),
                    };
                    if !ignored {
                        labels.push((det.score, img, rank, g.is_some()));
                    }
                }
            }
            match oracle_curve(labels, n_gt, cfg.recall_points) {
                Some((ap, ar)) => {
                    aps.push(Some(ap));
                    ars.push(Some(ar));
                }
                None => {
                    aps.push(None);
                    ars.push(None);
                }
            }
        }
        out.push(OracleArea {
            ap: mean(&aps),
            ar: mean(&ars),
        });
    }
    out
}

fn random_box(rng: &mut impl Rng) -> BBox<f64> {
    let w = rng.random_range(4.0..160.0f64);
    let h = rng.random_range(4.0..160.0f64);
    BBox::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), w, h).unwrap()
}

fn jitter_box(rng: &mut impl Rng, b: &BBox<f64>) -> BBox<f64> {
    let s = 0.25;
    BBox::new(
        b.x + rng.random_range(-s..s) * b.w,
        b.y + rng.random_range(-s..s) * b.h,
        b.w * rng.random_range(0.7..1.3),
        b.h * rng.random_range(0.7..1.3),
    )
    .unwrap()
}

fn random_keypoints(rng: &mut impl Rng, b: &BBox<f64>, labeled: bool) -> KeypointSet<f64> {
    KeypointSet::new(std::array::from_fn(|_| {
        let v = if !labeled {
            Visibility::Unlabeled
        } else {
            match rng.random_range(0..4) {
                0 => Visibility::Unlabeled,
                1 => Visibility::Occluded,
                _ => Visibility::Visible,
            }
        };
        Keypoint::new(
            b.x + rng.random_range(0.0..1.0) * b.w,
            b.y + rng.random_range(0.0..1.0) * b.h,
            v,
        )
    }))
}

fn perturb_keypoints(rng: &mut impl Rng, k: &KeypointSet<f64>, scale: f64) -> KeypointSet<f64> {
    let mut out = k.clone();
    for p in out.points.iter_mut() {
        p.x += rng.random_range(-1.0..1.0) * scale;
        p.y += rng.random_range(-1.0..1.0) * scale;
        p.v = Visibility::Visible;
    }
    out
}

/// Up to 5 images, 4 ground truths and 6 detections per image. Scores are
/// drawn from a coarse grid so ties occur.
pub fn random_instance(rng: &mut impl Rng, keypoints: bool) -> (Dataset, Vec<Detection>) {
    let n_images = rng.random_range(1..=5);
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut dets = Vec::new();
    let mut next_ann = 1;
    // shuffled, non-contiguous ids
    let mut ids: Vec<u64> = (1..=n_images as u64).map(|i| i * 7 % 11 + 1).collect();
    ids.dedup();
    for &id in &ids {
        images.push(ImageRecord {
            id,
            file_name: format!("{id}.png"),
            width: 400,
            height: 400,
            source_dataset: "rand".into(),
            modality: None,
        });
        let n_gt = rng.random_range(0..=4);
        let mut gts = Vec::new();
        for _ in 0..n_gt {
            let bbox = random_box(rng);
            let crowd = rng.random_bool(0.1);
            let labeled = rng.random_bool(0.85);
            let kps = keypoints.then(|| random_keypoints(rng, &bbox, labeled));
            let num = kps.as_ref().map_or(0, |k| k.num_labeled());
            let a = AnnRecord {
                id: next_ann,
                image_id: id,
                category_id: 1,
                bbox,
                area: bbox.w * bbox.h * rng.random_range(0.5..1.0),
                keypoints: kps,
                num_keypoints: num,
                iscrowd: crowd,
            };
            next_ann += 1;
            gts.push(a.clone());
            annotations.push(a);
        }
        let n_det = rng.random_range(0..=6);
        for _ in 0..n_det {
            let base = if !gts.is_empty() && rng.random_bool(0.7) {
                Some(gts[rng.random_range(0..gts.len())].clone())
            } else {
                None
            };
            let bbox = match &base {
                Some(g) if rng.random_bool(0.3) => g.bbox,
                Some(g) => jitter_box(rng, &g.bbox),
                None => random_box(rng),
            };
            let score = rng.random_range(1..=10) as f64 / 10.0;
            let mut det = Detection::new(id, bbox, score);
            if keypoints {
                let k = match &base {
                    Some(g) => {
                        let gk = g.keypoints.clone().unwrap();
                        let s = [0.0, 1.0, 3.0, 8.0, 20.0][rng.random_range(0..5)];
                        perturb_keypoints(rng, &gk, s)
                    }
                    None => random_keypoints(rng, &bbox, true),
                };
                det = det.with_keypoints(k);
            }
            dets.push(det);
        }
    }
    let d = Dataset {
        images,
        annotations,
        categories: vec![Category::person()],
        split: Split::Test,
    };
    (d, dets)
}
