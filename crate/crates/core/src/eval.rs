//! COCO-protocol evaluation for a single person class.
//!
//! Detections are matched greedily per image in descending score order
//! against ground truth using IoU (or NWD) for boxes and OKS for keypoints.
//! Precision is interpolated at evenly spaced recall points and averaged over
//! similarity thresholds. Ground truth marked crowd, outside the evaluated
//! area range, or (for keypoints) without labeled points is "ignored": it is
//! not counted in recall and detections matched to it are neither true nor
//! false positives.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnRecord, Dataset, PERSON_CATEGORY_ID};
use crate::geometry::{iou, nwd, BBox, NwdConfig};
use crate::keypoints::{
    KeypointSet, Visibility, BODY_KEYPOINTS, COCO_SIGMAS, FACIAL_KEYPOINTS, NUM_KEYPOINTS,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection {index} references image_id {image_id} which is not in the dataset")]
    UnknownImage { index: usize, image_id: u64 },
    #[error("detection {index} has no keypoints but keypoint evaluation was requested")]
    MissingKeypoints { index: usize },
    #[error("detection {index} has invalid score {score}")]
    BadScore { index: usize, score: f64 },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("cannot aggregate reports: {0}")]
    Aggregate(String),
    #[error("results document: parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("results entry {index}: {message}")]
    BadResult { index: usize, message: String },
}

/// Closed area interval `[lo, hi]` in square pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    const HUGE: f64 = 1e10;

    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn all() -> Self {
        Self::new("all", 0.0, Self::HUGE)
    }

    pub fn small() -> Self {
        Self::new("small", 0.0, 32.0 * 32.0)
    }

    pub fn medium() -> Self {
        Self::new("medium", 32.0 * 32.0, 96.0 * 96.0)
    }

    pub fn large() -> Self {
        Self::new("large", 96.0 * 96.0, Self::HUGE)
    }

    pub fn coco_defaults() -> Vec<Self> {
        vec![Self::all(), Self::small(), Self::medium(), Self::large()]
    }

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area <= self.hi
    }
}

/// Box similarity used for detection matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum BoxSimilarity {
    #[default]
    Iou,
    Nwd {
        c: f64,
    },
}

/// Similarity for [`match_and_score`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Iou,
    Nwd(NwdConfig<f64>),
    Oks([f64; NUM_KEYPOINTS]),
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Twice the standard COCO per-keypoint sigmas.
pub fn default_kp_constants() -> [f64; NUM_KEYPOINTS] {
    COCO_SIGMAS.map(|s| 2.0 * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub oks_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_dets: usize,
    pub area_ranges: Vec<AreaRange>,
    pub kp_k: [f64; NUM_KEYPOINTS],
    #[serde(default)]
    pub box_similarity: BoxSimilarity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            oks_thresholds: coco_thresholds(),
            recall_points: 101,
            max_dets: 100,
            area_ranges: AreaRange::coco_defaults(),
            kp_k: default_kp_constants(),
            box_similarity: BoxSimilarity::Iou,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        for (name, t) in [("iou", &self.iou_thresholds), ("oks", &self.oks_thresholds)] {
            if t.is_empty() {
                return bad(format!("{name} thresholds are empty"));
            }
            if t.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("{name} thresholds must be strictly increasing"));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("{name} thresholds must lie in [0, 1]"));
            }
        }
        if self.recall_points < 2 {
            return bad("need at least 2 recall points".into());
        }
        if self.max_dets == 0 {
            return bad("max_dets must be positive".into());
        }
        if self.area_ranges.is_empty() {
            return bad("no area ranges".into());
        }
        if self.kp_k.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
            return bad("per-keypoint constants must be positive".into());
        }
        if let BoxSimilarity::Nwd { c } = self.box_similarity {
            if !(c > 0.0) {
                return bad(format!("NWD constant must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Evenly spaced recall points in `[0, 1]`.
    pub fn recall_thresholds(&self) -> Vec<f64> {
        let n = self.recall_points;
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    fn headline_area(&self) -> usize {
        self.area_ranges
            .iter()
            .position(|a| a.name == "all")
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox<f64>,
    pub score: f64,
    pub keypoints: Option<KeypointSet<f64>>,
}

impl Detection {
    pub fn new(image_id: u64, bbox: BBox<f64>, score: f64) -> Self {
        Self {
            image_id,
            category_id: PERSON_CATEGORY_ID,
            bbox,
            score,
            keypoints: None,
        }
    }

    pub fn with_keypoints(mut self, kps: KeypointSet<f64>) -> Self {
        self.keypoints = Some(kps);
        self
    }
}

/// Per-keypoint OKS terms `exp(-d² / (2 s² k²))` for labeled ground-truth
/// points; `None` for unlabeled ones.
pub fn keypoint_similarities<T: Scalar>(
    gt: &KeypointSet<T>,
    area: T,
    pred: &KeypointSet<T>,
    kp_k: &[T; NUM_KEYPOINTS],
) -> [Option<T>; NUM_KEYPOINTS] {
    let two = T::lit(2.0);
    let scale = area + T::epsilon();
    std::array::from_fn(|i| {
        let g = &gt.points[i];
        if !g.v.is_labeled() {
            return None;
        }
        let p = &pred.points[i];
        let (dx, dy) = (p.x - g.x, p.y - g.y);
        let d2 = dx * dx + dy * dy;
        Some((-d2 / (two * scale * kp_k[i] * kp_k[i])).exp())
    })
}

/// Object keypoint similarity averaged over labeled ground-truth points.
/// `None` when the ground truth has no labeled point.
pub fn object_keypoint_similarity<T: Scalar>(
    gt: &KeypointSet<T>,
    area: T,
    pred: &KeypointSet<T>,
    kp_k: &[T; NUM_KEYPOINTS],
) -> Option<T> {
    let terms = keypoint_similarities(gt, area, pred, kp_k);
    let (sum, n) = terms
        .iter()
        .flatten()
        .fold((T::zero(), 0usize), |(s, n), &t| (s + t, n + 1));
    (n > 0).then(|| sum / T::from_usize_lossy(n))
}

/// OKS between an annotation and a predicted keypoint set; `None` if the
/// annotation has no labeled keypoints.
pub fn oks(gt: &AnnRecord, pred: &KeypointSet<f64>, cfg: &EvalConfig) -> Option<f64> {
    let kps = gt.keypoints.as_ref()?;
    object_keypoint_similarity(kps, gt.area, pred, &cfg.kp_k)
}

/// IoU with a crowd region: intersection over the detection's own area.
fn crowd_iou(det: &BBox<f64>, crowd: &BBox<f64>) -> f64 {
    let a = det.area();
    if a <= 0.0 {
        0.0
    } else {
        det.intersection_area(crowd) / a
    }
}

fn pair_similarity(det: &Detection, gt: &AnnRecord, sim: &Similarity) -> Option<f64> {
    match sim {
        Similarity::Iou if gt.iscrowd => Some(crowd_iou(&det.bbox, &gt.bbox)),
        Similarity::Iou => Some(iou(&det.bbox, &gt.bbox)),
        Similarity::Nwd(cfg) => nwd(&det.bbox, &gt.bbox, cfg).ok(),
        Similarity::Oks(k) => {
            let pred = det.keypoints.as_ref()?;
            let kps = gt.keypoints.as_ref()?;
            object_keypoint_similarity(kps, gt.area, pred, k)
        }
    }
}

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    /// Index into the detection list passed in.
    pub det: usize,
    pub gt: Option<usize>,
    pub similarity: Option<f64>,
}

/// Detection indices sorted by descending score; ties keep input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matcher shared by the public entry point and the evaluator.
///
/// `sims[d][g]` is the similarity of detection `d` (already in score order)
/// to ground truth `g`. Non-ignored ground truth is preferred over ignored;
/// within a group the highest similarity wins and ties go to the lowest
/// index. Crowd ground truth can absorb any number of detections.
fn greedy_match(
    sims: &[Vec<Option<f64>>],
    gt_ignore: &[bool],
    gt_crowd: &[bool],
    threshold: f64,
) -> Vec<Option<usize>> {
    let threshold = threshold.min(1.0 - 1e-10);
    let gt_order: Vec<usize> = (0..gt_ignore.len())
        .filter(|&g| !gt_ignore[g])
        .chain((0..gt_ignore.len()).filter(|&g| gt_ignore[g]))
        .collect();
    let mut taken = vec![false; gt_ignore.len()];
    sims.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_order {
                if taken[g] && !gt_crowd[g] {
                    continue;
                }
                if let Some((m, _)) = best {
                    if !gt_ignore[m] && gt_ignore[g] {
                        break;
                    }
                }
                let Some(s) = row[g] else { continue };
                if s < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((g, s));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.map(|(g, _)| g)
        })
        .collect()
}

/// Matches one image's detections against its ground truth at a single
/// threshold. Outcomes are returned in descending score order.
pub fn match_and_score(
    gts: &[AnnRecord],
    dets: &[Detection],
    threshold: f64,
    similarity: &Similarity,
) -> Vec<MatchOutcome> {
    let order = score_order(dets.iter().map(|d| d.score));
    let sims: Vec<Vec<Option<f64>>> = order
        .iter()
        .map(|&d| {
            gts.iter()
                .map(|g| pair_similarity(&dets[d], g, similarity))
                .collect()
        })
        .collect();
    let keypoint_mode = matches!(similarity, Similarity::Oks(_));
    let ignore: Vec<bool> = gts
        .iter()
        .map(|g| g.iscrowd || (keypoint_mode && g.num_keypoints == 0))
        .collect();
    let crowd: Vec<bool> = gts.iter().map(|g| g.iscrowd).collect();
    let matches = greedy_match(&sims, &ignore, &crowd, threshold);
    order
        .iter()
        .zip(matches)
        .enumerate()
        .map(|(rank, (&det, gt))| MatchOutcome {
            det,
            gt,
            similarity: gt.and_then(|g| sims[rank][g]),
        })
        .collect()
}

/// Label of a ranked detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    /// Matched to ignored ground truth, or outside the evaluated area range.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub label: MatchLabel,
}

/// Interpolated AP and final recall of one precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSummary {
    pub ap: f64,
    pub recall: f64,
}

/// Builds the PR curve from matches given in reduction order and
/// summarizes it. `None` when there is no ground truth.
pub fn summarize_curve(
    matches: &[ScoredMatch],
    n_gt: usize,
    recall_thresholds: &[f64],
) -> Option<CurveSummary> {
    if n_gt == 0 {
        return None;
    }
    let order = score_order(matches.iter().map(|m| m.score));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        match matches[i].label {
            MatchLabel::TruePositive => tp += 1,
            MatchLabel::FalsePositive => fp += 1,
            MatchLabel::Ignored => {}
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
    }
    // precision envelope, non-increasing from the right
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = recall_thresholds
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&rc| rc < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(CurveSummary {
        ap: total / recall_thresholds.len() as f64,
        recall: recall.last().copied().unwrap_or(0.0),
    })
}

/// 101-point (or `recall_points`) interpolated average precision.
pub fn average_precision(matches: &[ScoredMatch], n_gt: usize, recall_points: usize) -> Option<f64> {
    let n = recall_points.max(2);
    let thresholds: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    summarize_curve(matches, n_gt, &thresholds).map(|s| s.ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Detection,
    Keypoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetric {
    pub threshold: f64,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaMetric {
    pub area: String,
    pub ap: Option<f64>,
    pub ar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOks {
    pub facial: Option<f64>,
    pub body: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: u64,
    pub gts: u64,
    pub dets: u64,
}

/// Metrics in `[0, 1]`; `None` where not applicable (no ground truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub ap: Option<f64>,
    /// Recall with at most `max_dets` detections per image, averaged over
    /// thresholds.
    pub ar_at_100: Option<f64>,
    pub ap_by_threshold: Vec<ThresholdMetric>,
    pub ap_by_area: Vec<AreaMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_keypoint_oks_mean: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_group_oks: Option<GroupOks>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.ap_by_threshold
            .iter()
            .find(|t| (t.threshold - threshold).abs() < 1e-9)
            .and_then(|t| t.ap)
    }

    pub fn ap_for_area(&self, name: &str) -> Option<f64> {
        self.ap_by_area
            .iter()
            .find(|a| a.area == name)
            .and_then(|a| a.ap)
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-image matching results: `[area][threshold]` ranked labels.
struct ImageResult {
    labels: Vec<Vec<Vec<ScoredMatch>>>,
    n_gt: Vec<usize>,
    /// OKS terms of matched pairs at the loosest threshold, headline area.
    kp_terms: Vec<[Option<f64>; NUM_KEYPOINTS]>,
}

fn evaluate_image(
    gts: &[&AnnRecord],
    dets: &[&Detection],
    cfg: &EvalConfig,
    similarity: &Similarity,
    thresholds: &[f64],
) -> ImageResult {
    let keypoint_mode = matches!(similarity, Similarity::Oks(_));
    let mut order = score_order(dets.iter().map(|d| d.score));
    order.truncate(cfg.max_dets);
    let sims: Vec<Vec<Option<f64>>> = order
        .iter()
        .map(|&d| {
            gts.iter()
                .map(|g| pair_similarity(dets[d], g, similarity))
                .collect()
        })
        .collect();
    let crowd: Vec<bool> = gts.iter().map(|g| g.iscrowd).collect();
    let headline = cfg.headline_area();
    let mut kp_terms = Vec::new();
    let mut labels = Vec::with_capacity(cfg.area_ranges.len());
    let mut n_gt = Vec::with_capacity(cfg.area_ranges.len());
    for (ai, range) in cfg.area_ranges.iter().enumerate() {
        let ignore: Vec<bool> = gts
            .iter()
            .map(|g| {
                g.iscrowd || !range.contains(g.area) || (keypoint_mode && g.num_keypoints == 0)
            })
            .collect();
        n_gt.push(ignore.iter().filter(|&&i| !i).count());
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let matches = greedy_match(&sims, &ignore, &crowd, t);
            let ranked = order
                .iter()
                .zip(&matches)
                .map(|(&d, m)| {
                    let label = match m {
                        Some(g) if ignore[*g] => MatchLabel::Ignored,
                        Some(_) => MatchLabel::TruePositive,
                        None if !range.contains(dets[d].bbox.area()) => MatchLabel::Ignored,
                        None => MatchLabel::FalsePositive,
                    };
                    ScoredMatch {
                        score: dets[d].score,
                        label,
                    }
                })
                .collect();
            if keypoint_mode && ai == headline && ti == 0 {
                for (&d, m) in order.iter().zip(&matches) {
                    let Some(g) = *m else { continue };
                    if ignore[g] {
                        continue;
                    }
                    if let (Some(gk), Some(pk), Similarity::Oks(k)) =
                        (&gts[g].keypoints, &dets[d].keypoints, similarity)
                    {
                        kp_terms.push(keypoint_similarities(gk, gts[g].area, pk, k));
                    }
                }
            }
            per_threshold.push(ranked);
        }
        labels.push(per_threshold);
    }
    ImageResult {
        labels,
        n_gt,
        kp_terms,
    }
}

fn evaluate(
    d: &Dataset,
    dets: &[Detection],
    cfg: &EvalConfig,
    mode: EvalMode,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let (similarity, thresholds) = match mode {
        EvalMode::Detection => (
            match cfg.box_similarity {
                BoxSimilarity::Iou => Similarity::Iou,
                BoxSimilarity::Nwd { c } => Similarity::Nwd(
                    NwdConfig::new(c).map_err(|e| EvalError::InvalidConfig(e.to_string()))?,
                ),
            },
            &cfg.iou_thresholds,
        ),
        EvalMode::Keypoints => (Similarity::Oks(cfg.kp_k), &cfg.oks_thresholds),
    };

    let mut image_ids: Vec<u64> = d.images.iter().map(|i| i.id).collect();
    image_ids.sort_unstable();
    let known: std::collections::HashSet<u64> = image_ids.iter().copied().collect();
    let mut dets_by_image: HashMap<u64, Vec<&Detection>> = HashMap::new();
    for (index, det) in dets.iter().enumerate() {
        if !known.contains(&det.image_id) {
            return Err(EvalError::UnknownImage {
                index,
                image_id: det.image_id,
            });
        }
        if !det.score.is_finite() {
            return Err(EvalError::BadScore {
                index,
                score: det.score,
            });
        }
        if mode == EvalMode::Keypoints && det.keypoints.is_none() {
            return Err(EvalError::MissingKeypoints { index });
        }
        dets_by_image.entry(det.image_id).or_default().push(det);
    }
    let gts_by_image = d.annotations_by_image();

    let results: Vec<ImageResult> = image_ids
        .par_iter()
        .map(|id| {
            let gts = gts_by_image.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let dets = dets_by_image.get(id).map(Vec::as_slice).unwrap_or(&[]);
            evaluate_image(gts, dets, cfg, &similarity, thresholds)
        })
        .collect();

    let recall_thresholds = cfg.recall_thresholds();
    // [area][threshold]
    let summaries: Vec<Vec<Option<CurveSummary>>> = (0..cfg.area_ranges.len())
        .map(|ai| {
            let n_gt: usize = results.iter().map(|r| r.n_gt[ai]).sum();
            (0..thresholds.len())
                .map(|ti| {
                    let merged: Vec<ScoredMatch> = results
                        .iter()
                        .flat_map(|r| r.labels[ai][ti].iter().copied())
                        .collect();
                    summarize_curve(&merged, n_gt, &recall_thresholds)
                })
                .collect()
        })
        .collect();

    let headline = cfg.headline_area();
    let ap_by_area: Vec<AreaMetric> = cfg
        .area_ranges
        .iter()
        .zip(&summaries)
        .map(|(range, s)| AreaMetric {
            area: range.name.clone(),
            ap: mean_present(s.iter().map(|c| c.map(|c| c.ap))),
            ar: mean_present(s.iter().map(|c| c.map(|c| c.recall))),
        })
        .collect();
    let ap_by_threshold = thresholds
        .iter()
        .zip(&summaries[headline])
        .map(|(&threshold, s)| ThresholdMetric {
            threshold,
            ap: s.map(|c| c.ap),
            recall: s.map(|c| c.recall),
        })
        .collect();

    let (per_keypoint_oks_mean, per_group_oks) = if mode == EvalMode::Keypoints {
        let terms: Vec<&[Option<f64>; NUM_KEYPOINTS]> =
            results.iter().flat_map(|r| r.kp_terms.iter()).collect();
        let per_kp: Vec<Option<f64>> = (0..NUM_KEYPOINTS)
            .map(|i| mean_present(terms.iter().map(|t| t[i])))
            .collect();
        let group = |range: std::ops::Range<usize>| {
            mean_present(terms.iter().flat_map(|t| t[range.clone()].iter().copied()))
        };
        (
            Some(per_kp),
            Some(GroupOks {
                facial: group(FACIAL_KEYPOINTS),
                body: group(BODY_KEYPOINTS),
            }),
        )
    } else {
        (None, None)
    };

    Ok(EvalReport {
        mode,
        ap: ap_by_area[headline].ap,
        ar_at_100: ap_by_area[headline].ar,
        ap_by_threshold,
        ap_by_area,
        per_keypoint_oks_mean,
        per_group_oks,
        counts: EvalCounts {
            images: d.images.len() as u64,
            gts: d.annotations.len() as u64,
            dets: dets.len() as u64,
        },
    })
}

/// Box mAP over `iou_thresholds` plus AR at `max_dets`.
pub fn evaluate_detections(
    d: &Dataset,
    dets: &[Detection],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    evaluate(d, dets, cfg, EvalMode::Detection)
}

/// Keypoint mAP over `oks_thresholds`, plus per-keypoint and facial/body
/// OKS means of pairs matched at the loosest threshold.
pub fn evaluate_keypoints(
    d: &Dataset,
    dets: &[Detection],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    evaluate(d, dets, cfg, EvalMode::Keypoints)
}

fn weighted(values: impl Iterator<Item = (Option<f64>, u64)>) -> Option<f64> {
    let (num, den) = values
        .filter_map(|(v, n)| v.map(|v| (v * n as f64, n as f64)))
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    (den > 0.0).then(|| num / den)
}

/// Frame-weighted average `Σ value·n / Σ n` of every metric. Reports whose
/// value is not applicable are left out of that metric's average.
pub fn weighted_average(reports: &[(EvalReport, u64)]) -> Result<EvalReport, EvalError> {
    let Some((first, _)) = reports.first() else {
        return Err(EvalError::Aggregate("no reports".into()));
    };
    if let Some(i) = reports.iter().position(|(_, n)| *n == 0) {
        return Err(EvalError::Aggregate(format!("report {i} has zero frames")));
    }
    for (i, (r, _)) in reports.iter().enumerate() {
        let same_thresholds = r.ap_by_threshold.len() == first.ap_by_threshold.len()
            && r.ap_by_threshold
                .iter()
                .zip(&first.ap_by_threshold)
                .all(|(a, b)| a.threshold == b.threshold);
        let same_areas = r.ap_by_area.len() == first.ap_by_area.len()
            && r.ap_by_area
                .iter()
                .zip(&first.ap_by_area)
                .all(|(a, b)| a.area == b.area);
        if r.mode != first.mode || !same_thresholds || !same_areas {
            return Err(EvalError::Aggregate(format!(
                "report {i} was produced with a different mode or configuration"
            )));
        }
    }
    let w = |f: &dyn Fn(&EvalReport) -> Option<f64>| weighted(reports.iter().map(|(r, n)| (f(r), *n)));
    let ap_by_threshold = first
        .ap_by_threshold
        .iter()
        .enumerate()
        .map(|(i, t)| ThresholdMetric {
            threshold: t.threshold,
            ap: w(&|r| r.ap_by_threshold[i].ap),
            recall: w(&|r| r.ap_by_threshold[i].recall),
        })
        .collect();
    let ap_by_area = first
        .ap_by_area
        .iter()
        .enumerate()
        .map(|(i, a)| AreaMetric {
            area: a.area.clone(),
            ap: w(&|r| r.ap_by_area[i].ap),
            ar: w(&|r| r.ap_by_area[i].ar),
        })
        .collect();
    let per_keypoint_oks_mean = first.per_keypoint_oks_mean.as_ref().map(|v| {
        (0..v.len())
            .map(|i| {
                w(&|r| {
                    r.per_keypoint_oks_mean
                        .as_ref()
                        .and_then(|p| p.get(i).copied().flatten())
                })
            })
            .collect()
    });
    let per_group_oks = first.per_group_oks.as_ref().map(|_| GroupOks {
        facial: w(&|r| r.per_group_oks.as_ref().and_then(|g| g.facial)),
        body: w(&|r| r.per_group_oks.as_ref().and_then(|g| g.body)),
    });
    let counts = reports.iter().fold(EvalCounts::default(), |acc, (r, _)| EvalCounts {
        images: acc.images + r.counts.images,
        gts: acc.gts + r.counts.gts,
        dets: acc.dets + r.counts.dets,
    });
    Ok(EvalReport {
        mode: first.mode,
        ap: w(&|r| r.ap),
        ar_at_100: w(&|r| r.ar_at_100),
        ap_by_threshold,
        ap_by_area,
        per_keypoint_oks_mean,
        per_group_oks,
        counts,
    })
}

// COCO results schema.

#[derive(Debug, Serialize, Deserialize)]
struct RawResult {
    image_id: u64,
    #[serde(default = "person_id")]
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoint_scores: Option<Vec<f64>>,
}

fn person_id() -> u64 {
    PERSON_CATEGORY_ID
}

/// Parses result keypoints. The third value of each triplet is a COCO
/// visibility flag when it is 0, 1 or 2; any other value is read as a
/// confidence and the point is taken as visible.
fn result_keypoints(values: &[f64], scores: Option<&[f64]>) -> Result<KeypointSet<f64>, String> {
    if values.len() != 3 * NUM_KEYPOINTS {
        return Err(format!(
            "expected {} keypoint values, got {}",
            3 * NUM_KEYPOINTS,
            values.len()
        ));
    }
    let mut set = KeypointSet::default();
    let mut conf = [0.0; NUM_KEYPOINTS];
    let mut has_conf = false;
    for (i, c) in values.chunks_exact(3).enumerate() {
        if !c[0].is_finite() || !c[1].is_finite() || !c[2].is_finite() {
            return Err(format!("keypoint {i} is not finite"));
        }
        let flag = (c[2].fract() == 0.0 && (0.0..=2.0).contains(&c[2]))
            .then(|| Visibility::from_code(c[2] as u8))
            .flatten();
        let v = flag.unwrap_or_else(|| {
            has_conf = true;
            conf[i] = c[2];
            Visibility::Visible
        });
        set.points[i] = crate::keypoints::Keypoint::new(c[0], c[1], v);
    }
    if let Some(s) = scores {
        if s.len() != NUM_KEYPOINTS {
            return Err(format!("expected {NUM_KEYPOINTS} keypoint scores, got {}", s.len()));
        }
        conf.copy_from_slice(s);
        has_conf = true;
    }
    if has_conf {
        set.confidences = Some(conf);
    }
    Ok(set)
}

/// Parses a COCO results array (box or keypoint variant).
pub fn parse_detections(text: &str) -> Result<Vec<Detection>, EvalError> {
    let raw: Vec<RawResult> = serde_json::from_str(text).map_err(|e| EvalError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(index, r)| {
            let bad = |message: String| EvalError::BadResult { index, message };
            if !(0.0..=1.0).contains(&r.score) {
                return Err(bad(format!("score {} outside [0, 1]", r.score)));
            }
            let keypoints = r
                .keypoints
                .as_deref()
                .map(|k| result_keypoints(k, r.keypoint_scores.as_deref()))
                .transpose()
                .map_err(bad)?;
            let bbox = match (r.bbox, &keypoints) {
                (Some([x, y, w, h]), _) => {
                    BBox::new(x, y, w, h).map_err(|e| bad(e.to_string()))?
                }
                (None, Some(k)) => k.labeled_extent().unwrap_or_else(|| {
                    let all = KeypointSet {
                        points: k.points.map(|p| crate::keypoints::Keypoint {
                            v: Visibility::Visible,
                            ..p
                        }),
                        confidences: None,
                    };
                    all.labeled_extent().expect("17 points")
                }),
                (None, None) => return Err(bad("entry has neither bbox nor keypoints".into())),
            };
            Ok(Detection {
                image_id: r.image_id,
                category_id: r.category_id,
                bbox,
                score: r.score,
                keypoints,
            })
        })
        .collect()
}

/// Serializes detections in the COCO results schema.
pub fn detections_to_json(dets: &[Detection]) -> String {
    let raw: Vec<RawResult> = dets
        .iter()
        .map(|d| RawResult {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: Some([d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h]),
            score: d.score,
            keypoints: d.keypoints.as_ref().map(KeypointSet::to_flat),
            keypoint_scores: d
                .keypoints
                .as_ref()
                .and_then(|k| k.confidences)
                .map(|c| c.to_vec()),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&raw).expect("results serialize");
    s.push('\n');
    s
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Fixed-width table of named reports, values ×100 with two decimals.
/// An optional weighted-average row is appended last.
pub fn report_table(rows: &[(String, u64, &EvalReport)], weighted: Option<&EvalReport>) -> String {
    let mut out = format!(
        "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "Set", "Frames", "AP", "AR", "AP50", "AP75", "APs", "APm", "APl"
    );
    let line = |name: &str, frames: String, r: &EvalReport| {
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            name,
            frames,
            pct(r.ap),
            pct(r.ar_at_100),
            pct(r.ap_at(0.5)),
            pct(r.ap_at(0.75)),
            pct(r.ap_for_area("small")),
            pct(r.ap_for_area("medium")),
            pct(r.ap_for_area("large")),
        )
    };
    for (name, frames, r) in rows {
        out.push_str(&line(name, frames.to_string(), r));
    }
    if let Some(w) = weighted {
        let total: u64 = rows.iter().map(|(_, n, _)| n).sum();
        out.push_str(&line("Weighted Average", total.to_string(), w));
    }
    if rows.iter().any(|(_, _, r)| r.per_group_oks.is_some()) {
        out.push_str(&format!(
            "{:<24} {:>8} {:>8}\n",
            "OKS (matched pairs)", "facial", "body"
        ));
        for (name, _, r) in rows {
            if let Some(g) = &r.per_group_oks {
                out.push_str(&format!("{:<24} {:>8} {:>8}\n", name, pct(g.facial), pct(g.body)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Category, ImageRecord, Split};
    use crate::keypoints::Keypoint;
    use approx::assert_abs_diff_eq;

    fn ann(id: u64, image_id: u64, b: [f64; 4]) -> AnnRecord {
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
        AnnRecord {
            id,
            image_id,
            category_id: 1,
            bbox,
            area: bbox.area(),
            keypoints: None,
            num_keypoints: 0,
            iscrowd: false,
        }
    }

    fn det(image_id: u64, b: [f64; 4], score: f64) -> Detection {
        Detection::new(image_id, BBox::new(b[0], b[1], b[2], b[3]).unwrap(), score)
    }

    fn dataset(images: &[u64], anns: Vec<AnnRecord>) -> Dataset {
        Dataset {
            images: images
                .iter()
                .map(|&id| ImageRecord {
                    id,
                    file_name: format!("{id}.png"),
                    width: 640,
                    height: 480,
                    source_dataset: "t".into(),
                    modality: None,
                })
                .collect(),
            annotations: anns,
            categories: vec![Category::person()],
            split: Split::Test,
        }
    }

    fn with_kps(mut a: AnnRecord, kps: KeypointSet<f64>) -> AnnRecord {
        a.num_keypoints = kps.num_labeled();
        a.keypoints = Some(kps);
        a
    }

    fn grid_kps(x0: f64, y0: f64) -> KeypointSet<f64> {
        KeypointSet::new(std::array::from_fn(|i| {
            Keypoint::new(x0 + (i % 4) as f64 * 10.0, y0 + (i / 4) as f64 * 10.0, Visibility::Visible)
        }))
    }

    #[test]
    fn oks_examples() {
        let cfg = EvalConfig::default();
        let kps = grid_kps(10.0, 10.0);
        let mut a = with_kps(ann(1, 1, [0.0, 0.0, 100.0, 100.0]), kps.clone());
        assert_eq!(oks(&a, &kps, &cfg), Some(1.0));

        // one labeled point displaced by 10 px, s² = 10000, k = 0.1
        let mut gt = KeypointSet::default();
        gt.points[0] = Keypoint::new(50.0, 50.0, Visibility::Visible);
        let mut pred = gt.clone();
        pred.points[0].x += 6.0;
        pred.points[0].y += 8.0;
        let k = [0.1; NUM_KEYPOINTS];
        let v = object_keypoint_similarity(&gt, 10_000.0, &pred, &k).unwrap();
        assert_abs_diff_eq!(v, (-0.5f64).exp(), epsilon = 1e-12);

        // unlabeled points are ignored regardless of displacement
        let mut partial = kps.clone();
        partial.points[3].v = Visibility::Unlabeled;
        a = with_kps(a, partial);
        let mut far = kps.clone();
        far.points[3].x += 1e6;
        assert_eq!(oks(&a, &far, &cfg), Some(1.0));

        let empty = with_kps(ann(2, 1, [0.0, 0.0, 10.0, 10.0]), KeypointSet::default());
        assert_eq!(oks(&empty, &kps, &cfg), None);
        assert_eq!(oks(&ann(3, 1, [0.0; 4]), &kps, &cfg), None);
    }

    #[test]
    fn greedy_prefers_higher_score() {
        let gts = vec![ann(1, 1, [0.0, 0.0, 10.0, 10.0])];
        let dets = vec![
            det(1, [0.0, 0.0, 10.0, 10.0], 0.8),
            det(1, [0.0, 0.0, 10.0, 9.0], 0.9),
        ];
        let out = match_and_score(&gts, &dets, 0.5, &Similarity::Iou);
        assert_eq!(out[0].det, 1);
        assert_eq!(out[0].gt, Some(0));
        assert_eq!(out[1].gt, None);
    }

    #[test]
    fn crowd_absorbs_multiple_detections() {
        let mut crowd = ann(1, 1, [0.0, 0.0, 100.0, 100.0]);
        crowd.iscrowd = true;
        let gts = vec![crowd];
        let dets = vec![
            det(1, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(1, [20.0, 20.0, 10.0, 10.0], 0.8),
        ];
        let out = match_and_score(&gts, &dets, 0.5, &Similarity::Iou);
        assert!(out.iter().all(|m| m.gt == Some(0)));
        // and they are neither TP nor FP
        let d = dataset(&[1], gts);
        let r = evaluate_detections(&d, &dets, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, None);
    }

    #[test]
    fn ap_basic_cases() {
        let tp = ScoredMatch {
            score: 0.9,
            label: MatchLabel::TruePositive,
        };
        let fp = ScoredMatch {
            score: 0.8,
            label: MatchLabel::FalsePositive,
        };
        assert_eq!(average_precision(&[tp], 1, 101), Some(1.0));
        assert_eq!(average_precision(&[], 3, 101), Some(0.0));
        assert_eq!(average_precision(&[tp], 0, 101), None);
        // [TP, FP, TP], n_gt = 2: precision 1 up to recall 0.5, then 2/3
        let tp2 = ScoredMatch { score: 0.7, ..tp };
        let ap = average_precision(&[tp, fp, tp2], 2, 101).unwrap();
        let oracle = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert_abs_diff_eq!(ap, oracle, epsilon = 1e-12);
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![
            ann(1, 1, [0.0, 0.0, 20.0, 40.0]),
            ann(2, 1, [100.0, 100.0, 50.0, 120.0]),
            ann(3, 2, [10.0, 10.0, 200.0, 200.0]),
        ];
        let d = dataset(&[1, 2, 3], gts.clone());
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection::new(g.image_id, g.bbox, 1.0))
            .collect();
        let cfg = EvalConfig::default();
        let r = evaluate_detections(&d, &dets, &cfg).unwrap();
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.ar_at_100, Some(1.0));
        assert_eq!(r.ap_for_area("small"), Some(1.0));
        assert_eq!(r.counts, EvalCounts { images: 3, gts: 3, dets: 3 });

        let r = evaluate_detections(&d, &[], &cfg).unwrap();
        assert_eq!((r.ap, r.ar_at_100), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn unknown_image_is_an_error() {
        let d = dataset(&[1], vec![]);
        let err = evaluate_detections(&d, &[det(9, [0.0, 0.0, 1.0, 1.0], 0.5)], &EvalConfig::default());
        assert!(matches!(err, Err(EvalError::UnknownImage { image_id: 9, .. })));
    }

    #[test]
    fn keypoint_eval_groups() {
        let gt_kps = grid_kps(20.0, 20.0);
        let gts = vec![with_kps(ann(1, 1, [10.0, 10.0, 60.0, 80.0]), gt_kps.clone())];
        let d = dataset(&[1], gts.clone());
        let cfg = EvalConfig::default();
        let exact = vec![Detection::new(1, gts[0].bbox, 0.9).with_keypoints(gt_kps.clone())];
        let r = evaluate_keypoints(&d, &exact, &cfg).unwrap();
        assert_eq!(r.ap, Some(1.0));

        let mut off = gt_kps.clone();
        for p in &mut off.points[FACIAL_KEYPOINTS] {
            p.x += 1.5;
        }
        let r = evaluate_keypoints(
            &d,
            &[Detection::new(1, gts[0].bbox, 0.9).with_keypoints(off)],
            &cfg,
        )
        .unwrap();
        let g = r.per_group_oks.unwrap();
        assert!(g.facial.unwrap() < g.body.unwrap());
        assert_eq!(g.body, Some(1.0));
        assert!(matches!(
            evaluate_keypoints(&d, &[det(1, [0.0, 0.0, 1.0, 1.0], 0.5)], &cfg),
            Err(EvalError::MissingKeypoints { index: 0 })
        ));
    }

    #[test]
    fn weighted_average_examples() {
        let d = dataset(&[1], vec![ann(1, 1, [0.0, 0.0, 10.0, 10.0])]);
        let base = evaluate_detections(&d, &[], &EvalConfig::default()).unwrap();
        let mk = |ap: f64| EvalReport {
            ap: Some(ap),
            ..base.clone()
        };
        let avg = weighted_average(&[(mk(20.0), 100), (mk(40.0), 300)]).unwrap();
        assert_abs_diff_eq!(avg.ap.unwrap(), (20.0 * 100.0 + 40.0 * 300.0) / 400.0, epsilon = 1e-12);
        assert_abs_diff_eq!(avg.ap.unwrap(), 35.0, epsilon = 1e-12);
        let eq = weighted_average(&[(mk(0.2), 5), (mk(0.6), 5)]).unwrap();
        assert_abs_diff_eq!(eq.ap.unwrap(), 0.4, epsilon = 1e-12);
        assert_eq!(weighted_average(&[(mk(0.3), 7)]).unwrap().ap, Some(0.3));
        assert!(weighted_average(&[]).is_err());
        assert!(weighted_average(&[(mk(0.3), 0)]).is_err());
    }

    #[test]
    fn results_round_trip() {
        let mut k = grid_kps(5.0, 5.0);
        k.confidences = Some([0.5; NUM_KEYPOINTS]);
        let dets = vec![
            det(3, [1.0, 2.0, 3.0, 4.0], 0.25),
            Detection::new(4, BBox::new(0.0, 0.0, 40.0, 50.0).unwrap(), 0.75).with_keypoints(k),
        ];
        let text = detections_to_json(&dets);
        assert_eq!(parse_detections(&text).unwrap(), dets);
    }

    #[test]
    fn results_keypoint_variant_without_bbox() {
        let mut flat = vec![0.0; 51];
        for i in 0..17 {
            flat[3 * i] = 10.0 + i as f64;
            flat[3 * i + 1] = 20.0;
            flat[3 * i + 2] = 0.9;
        }
        let text = serde_json::json!([{"image_id": 1, "category_id": 1, "keypoints": flat, "score": 0.5}]).to_string();
        let d = parse_detections(&text).unwrap();
        assert_eq!(d[0].bbox.x, 10.0);
        assert_eq!(d[0].bbox.w, 16.0);
        assert_eq!(d[0].keypoints.as_ref().unwrap().confidences.unwrap()[0], 0.9);
        assert!(parse_detections(r#"[{"image_id": 1, "score": 0.5}]"#).is_err());
        assert!(parse_detections(r#"[{"image_id": 1, "bbox": [0,0,1,1], "score": 1.5}]"#).is_err());
        assert!(matches!(parse_detections("[{"), Err(EvalError::Parse { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let c = EvalConfig { iou_thresholds: vec![0.5, 0.5], ..EvalConfig::default() };
        assert!(c.validate().is_err());
        let mut c = EvalConfig::default();
        c.kp_k[3] = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(EvalConfig::default().recall_thresholds()[100], 1.0);
        assert_abs_diff_eq!(default_kp_constants()[0], 0.052, epsilon = 1e-15);
    }

    #[test]
    fn table_formats_percentages() {
        let d = dataset(&[1], vec![ann(1, 1, [0.0, 0.0, 10.0, 10.0])]);
        let r = evaluate_detections(
            &d,
            &[det(1, [0.0, 0.0, 10.0, 10.0], 1.0)],
            &EvalConfig::default(),
        )
        .unwrap();
        let t = report_table(&[("set".into(), 1, &r)], Some(&r));
        assert!(t.contains("100.00"));
        assert!(t.contains("Weighted Average"));
    }
}
