//! Per-stage latency measurement and realtime budget accounting.
//!
//! Statistics and report arithmetic are generic over the value type so the
//! same code runs on measured `f64` milliseconds and on exact rationals.

use std::fmt::Debug;
use std::time::{Duration, Instant};

use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{
    detect_stage, pose_stage, DetectorBackend, Frame, PipelineError, PoseBackend, RunConfig,
};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_FPS_BUDGET: f64 = 25.0;
/// Max/min sample ratio above which a stage is flagged as jittery.
pub const JITTER_RATIO: f64 = 10.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least one timed iteration is required")]
    NoIterations,
    #[error("no stages to report")]
    NoStages,
    #[error("frame budget must be positive, got {0}")]
    InvalidBudget(f64),
    #[error("stage {stage} failed after {completed} timed samples: {message}")]
    StageFailed {
        stage: String,
        completed: usize,
        message: String,
        /// Samples recorded before the failure.
        timing: StageTiming<f64>,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Value usable in latency statistics: `f64` milliseconds or an exact type
/// such as `Ratio<i64>`.
pub trait LatencyValue:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync
{
}

impl<T> LatencyValue for T where
    T: Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync
{
}

/// Samples of one stage in milliseconds; warmup iterations excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming<T> {
    pub name: String,
    pub samples: Vec<T>,
    pub warmup_count: usize,
}

impl<T: LatencyValue> StageTiming<T> {
    pub fn new(name: impl Into<String>, samples: Vec<T>, warmup_count: usize) -> Self {
        Self {
            name: name.into(),
            samples,
            warmup_count,
        }
    }
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs `warmup` untimed then `iterations` timed calls of `stage` on a
/// monotonic clock.
pub fn time_stage<E: std::fmt::Display>(
    name: &str,
    iterations: usize,
    warmup: usize,
    mut stage: impl FnMut() -> Result<(), E>,
) -> Result<StageTiming<f64>, BenchError> {
    if iterations == 0 {
        return Err(BenchError::NoIterations);
    }
    let mut timing = StageTiming::new(name, Vec::with_capacity(iterations), warmup);
    let failed = |timing: StageTiming<f64>, e: E| BenchError::StageFailed {
        stage: name.to_string(),
        completed: timing.samples.len(),
        message: e.to_string(),
        timing,
    };
    for _ in 0..warmup {
        if let Err(e) = stage() {
            return Err(failed(timing, e));
        }
    }
    for _ in 0..iterations {
        let t0 = Instant::now();
        let r = stage();
        let dt = millis(t0.elapsed());
        if let Err(e) = r {
            return Err(failed(timing, e));
        }
        timing.samples.push(dt);
    }
    Ok(timing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats<T> {
    pub name: String,
    pub count: usize,
    pub warmup_count: usize,
    pub mean: T,
    pub median: T,
    /// Nearest-rank 95th percentile.
    pub p95: T,
    pub min: T,
    pub max: T,
    /// `max / min > 10`.
    pub jitter: bool,
}

/// Summary statistics; an empty sample list yields zeros with count 0.
pub fn stage_stats<T: LatencyValue>(t: &StageTiming<T>) -> StageStats<T> {
    let mut s = t.samples.clone();
    s.sort_by(|a, b| a.partial_cmp(b).expect("comparable samples"));
    let n = s.len();
    let zero = T::zero();
    if n == 0 {
        return StageStats {
            name: t.name.clone(),
            count: 0,
            warmup_count: t.warmup_count,
            mean: zero,
            median: zero,
            p95: zero,
            min: zero,
            max: zero,
            jitter: false,
        };
    }
    let count = T::from_usize(n).expect("sample count representable");
    let mean = s.iter().fold(zero, |a, &b| a + b) / count;
    let two = T::one() + T::one();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / two
    };
    let rank = (95 * n).div_ceil(100).max(1);
    let (min, max) = (s[0], s[n - 1]);
    let jitter = match (min.to_f64(), max.to_f64()) {
        (Some(lo), Some(hi)) if lo > 0.0 => hi / lo > JITTER_RATIO,
        _ => false,
    };
    StageStats {
        name: t.name.clone(),
        count: n,
        warmup_count: t.warmup_count,
        mean,
        median,
        p95: s[rank - 1],
        min,
        max,
        jitter,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport<T> {
    pub stages: Vec<StageStats<T>>,
    /// Sum of stage means.
    pub total: T,
    pub fps_budget: T,
    /// `1000 / fps_budget - total`.
    pub headroom: T,
    /// Some stage exceeded the jitter ratio.
    pub jitter: bool,
}

pub fn compose_report<T: LatencyValue>(
    stages: &[StageTiming<T>],
    fps_budget: T,
) -> Result<LatencyReport<T>, BenchError> {
    if stages.is_empty() {
        return Err(BenchError::NoStages);
    }
    if !(fps_budget > T::zero()) {
        return Err(BenchError::InvalidBudget(fps_budget.to_f64().unwrap_or(f64::NAN)));
    }
    let stats: Vec<StageStats<T>> = stages.iter().map(stage_stats).collect();
    let total = stats.iter().fold(T::zero(), |a, s| a + s.mean);
    let thousand = T::from_u32(1000).expect("1000 representable");
    Ok(LatencyReport {
        jitter: stats.iter().any(|s| s.jitter),
        stages: stats,
        total,
        fps_budget,
        headroom: thousand / fps_budget - total,
    })
}

fn ms(v: impl ToPrimitive) -> String {
    format!("{:.2}", v.to_f64().unwrap_or(f64::NAN))
}

/// Fixed-width "Latency [ms]" table.
pub fn latency_table<T: LatencyValue>(r: &LatencyReport<T>) -> String {
    let mut out = format!(
        "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "Latency [ms]", "N", "Mean", "Median", "P95", "Min", "Max"
    );
    for s in &r.stages {
        out.push_str(&format!(
            "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}{}\n",
            s.name,
            s.count,
            ms(s.mean),
            ms(s.median),
            ms(s.p95),
            ms(s.min),
            ms(s.max),
            if s.jitter { "  (jitter)" } else { "" }
        ));
    }
    out.push_str(&format!("{:<14} {:>6} {:>10}\n", "Total", "", ms(r.total)));
    out.push_str(&format!(
        "{:<14} {:>6} {:>10}   ({} fps budget)\n",
        "Headroom",
        "",
        ms(r.headroom),
        ms(r.fps_budget)
    ));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    /// Passes over the frame list after warmup.
    pub iterations: usize,
    pub fps_budget: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            iterations: 1,
            fps_budget: DEFAULT_FPS_BUDGET,
        }
    }
}

pub const STAGE_PREPROCESS: &str = "preprocess";
pub const STAGE_DETECT: &str = "detect";
pub const STAGE_CROP_DECODE: &str = "crop+decode";
pub const STAGE_POSE: &str = "pose";

/// Times the four pipeline stages over `frames`. The first `warmup` frame
/// runs (cycling through the list) are discarded. The pose stage records
/// one sample per frame with at least one person: the time of all pose
/// calls on that frame.
pub fn bench_pipeline<D, P>(
    frames: &[Frame],
    det: &mut D,
    pose: &mut P,
    run: &RunConfig,
    cfg: &BenchConfig,
) -> Result<LatencyReport<f64>, BenchError>
where
    D: DetectorBackend + ?Sized,
    P: PoseBackend + ?Sized,
{
    run.validate()?;
    if frames.is_empty() || cfg.iterations == 0 {
        return Err(BenchError::NoIterations);
    }
    let mut stages = [
        StageTiming::new(STAGE_PREPROCESS, vec![], cfg.warmup),
        StageTiming::new(STAGE_DETECT, vec![], cfg.warmup),
        StageTiming::new(STAGE_CROP_DECODE, vec![], cfg.warmup),
        StageTiming::new(STAGE_POSE, vec![], cfg.warmup),
    ];
    let total_runs = cfg.warmup + cfg.iterations * frames.len();
    for i in 0..total_runs {
        let f = &frames[i % frames.len()];
        let fail = |stage: &str, stages: &[StageTiming<f64>; 4], e: String| BenchError::StageFailed {
            stage: stage.to_string(),
            completed: stages[0].samples.len(),
            message: e,
            timing: stages[0].clone(),
        };
        let detected = detect_stage(f, det, run).map_err(|e| fail(STAGE_DETECT, &stages, e.to_string()))?;
        let persons = detected.boxes.len();
        let r = pose_stage(f, detected, pose, run).map_err(|e| fail(STAGE_POSE, &stages, e.to_string()))?;
        if i < cfg.warmup {
            continue;
        }
        let t = r.timings;
        stages[0].samples.push(t.preprocess_ms);
        stages[1].samples.push(t.detect_ms);
        stages[2].samples.push(t.crop_ms + t.decode_ms);
        if persons > 0 {
            stages[3].samples.push(t.pose_ms);
        }
    }
    compose_report(&stages, cfg.fps_budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    type Q = Ratio<i64>;

    fn q(n: i64, d: i64) -> Q {
        Ratio::new(n, d)
    }

    #[test]
    fn stats_match_direct_computation() {
        let samples = vec![5.0, 1.0, 4.0, 2.0, 3.0, 10.0, 7.0, 6.0, 9.0, 8.0];
        let s = stage_stats(&StageTiming::new("x", samples.clone(), 0));
        assert_eq!(s.mean, 5.5);
        assert_eq!(s.median, 5.5);
        // nearest rank: ceil(0.95 * 10) = 10th smallest
        assert_eq!(s.p95, 10.0);
        assert_eq!((s.min, s.max), (1.0, 10.0));
        assert!(!s.jitter);

        let twenty: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(stage_stats(&StageTiming::new("y", twenty, 0)).p95, 19.0);
        let odd = stage_stats(&StageTiming::new("z", vec![3.0, 1.0, 2.0], 0));
        assert_eq!((odd.median, odd.p95), (2.0, 3.0));
        assert!(stage_stats(&StageTiming::new("j", vec![1.0, 11.0], 0)).jitter);
    }

    #[test]
    fn exact_budget_arithmetic() {
        let det = StageTiming::new("detect", vec![q(13, 1)], 0);
        let pose = StageTiming::new("pose", vec![q(654, 100)], 0);
        let r = compose_report(&[det.clone(), pose.clone()], q(25, 1)).unwrap();
        assert_eq!(r.total, q(1954, 100));
        let pre = StageTiming::new("preprocess", vec![q(1, 2)], 0);
        let r = compose_report(&[det, pose, pre], q(25, 1)).unwrap();
        assert_eq!(r.total, q(2004, 100));
        assert_eq!(r.headroom, q(1996, 100));
    }

    #[test]
    fn zero_stage_report() {
        let r = compose_report(&[StageTiming::new("s", vec![0.0], 0)], 25.0).unwrap();
        assert_eq!((r.total, r.headroom), (0.0, 40.0));
        let empty = compose_report(&[StageTiming::<f64>::new("s", vec![], 0)], 25.0).unwrap();
        assert_eq!(empty.stages[0].count, 0);
        assert!(compose_report::<f64>(&[], 25.0).is_err());
        assert!(compose_report(&[StageTiming::new("s", vec![1.0], 0)], 0.0).is_err());
    }

    #[test]
    fn warmup_excluded_and_failures_keep_samples() {
        let mut calls = 0;
        let t = time_stage("count", 7, 5, || {
            calls += 1;
            Ok::<_, String>(())
        })
        .unwrap();
        assert_eq!((calls, t.samples.len(), t.warmup_count), (12, 7, 5));

        let mut n = 0;
        let err = time_stage("flaky", 10, 2, || {
            n += 1;
            if n == 6 {
                Err("boom")
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        match err {
            BenchError::StageFailed { completed, timing, .. } => {
                assert_eq!(completed, 3);
                assert_eq!(timing.samples.len(), 3);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            time_stage("none", 0, 0, || Ok::<_, String>(())),
            Err(BenchError::NoIterations)
        ));
    }

    #[test]
    fn table_layout() {
        let r = compose_report(&[StageTiming::new("detect", vec![13.0], 0)], 25.0).unwrap();
        let t = latency_table(&r);
        assert!(t.starts_with("Latency [ms]"));
        assert!(t.contains("13.00"));
        assert!(t.contains("27.00"));
    }
}
