use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aeropose_core::dataset::{load_dataset, Split};
use aeropose_core::eval::{
    evaluate_detections, evaluate_keypoints, parse_detections, report_table, weighted_average,
    BoxSimilarity, EvalReport,
};
use clap::Args;
use serde::Serialize;

use crate::error::{CliError, CliResult, Context};
use crate::settings::Settings;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth annotation file. Repeat together with --results for
    /// several test sets.
    #[arg(long = "gt", required = true, value_name = "PATH")]
    pub gts: Vec<PathBuf>,

    /// COCO results file paired with the --gt at the same position.
    #[arg(long = "results", required = true, value_name = "PATH")]
    pub results: Vec<PathBuf>,

    /// Row names, paired by position (default: ground-truth file stem).
    #[arg(long = "name", value_name = "NAME")]
    pub names: Vec<String>,

    /// JSON object mapping row names to frame counts used as weights for
    /// the average row (default: images per ground-truth file).
    #[arg(long, value_name = "PATH")]
    pub counts: Option<PathBuf>,

    /// Leave a named row out of the weighted average. Repeatable.
    #[arg(long = "exclude-from-average", value_name = "NAME")]
    pub exclude: Vec<String>,

    /// Write the full reports as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,

    /// Also write the printed table to a file.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Detections kept per image, highest scores first.
    #[arg(long)]
    pub max_dets: Option<usize>,

    /// Recall sample points of the interpolated precision curve.
    #[arg(long)]
    pub recall_points: Option<usize>,
}

impl EvalArgs {
    pub fn apply(&self, s: &mut Settings) {
        if let Some(m) = self.max_dets {
            s.eval.max_dets = m;
        }
        if let Some(r) = self.recall_points {
            s.eval.recall_points = r;
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalDetArgs {
    #[command(flatten)]
    pub common: EvalArgs,

    /// Match boxes by normalized Wasserstein distance with this constant
    /// instead of IoU.
    #[arg(long, value_name = "C")]
    pub nwd: Option<f64>,
}

impl EvalDetArgs {
    pub fn apply(&self, s: &mut Settings) {
        self.common.apply(s);
        if let Some(c) = self.nwd {
            s.eval.box_similarity = BoxSimilarity::Nwd { c };
        }
    }
}

#[derive(Debug, Serialize)]
struct NamedReport<'a> {
    name: &'a str,
    frames: u64,
    included_in_average: bool,
    report: &'a EvalReport,
}

#[derive(Debug, Serialize)]
struct ReportDocument<'a> {
    sets: Vec<NamedReport<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weighted_average: Option<&'a EvalReport>,
}

#[derive(Clone, Copy)]
enum Mode {
    Boxes,
    Keypoints,
}

fn row_names(a: &EvalArgs) -> CliResult<Vec<String>> {
    if a.gts.len() != a.results.len() {
        return Err(CliError::input(format!(
            "{} --gt files but {} --results files",
            a.gts.len(),
            a.results.len()
        )));
    }
    if !a.names.is_empty() && a.names.len() != a.gts.len() {
        return Err(CliError::input(format!(
            "{} --name values for {} test sets",
            a.names.len(),
            a.gts.len()
        )));
    }
    let names: Vec<String> = if a.names.is_empty() {
        a.gts
            .iter()
            .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
            .collect()
    } else {
        a.names.clone()
    };
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(CliError::input(format!("duplicate row name '{dup}'")));
    }
    if let Some(x) = a.exclude.iter().find(|x| !names.contains(x)) {
        return Err(CliError::input(format!("--exclude-from-average names unknown row '{x}'")));
    }
    Ok(names)
}

fn load_counts(path: &Path, names: &[String]) -> CliResult<Vec<u64>> {
    let text = std::fs::read_to_string(path).op(|| format!("reading {}", path.display()))?;
    let map: BTreeMap<String, u64> =
        serde_json::from_str(&text).input(|| format!("{}: expected an object of frame counts", path.display()))?;
    names
        .iter()
        .map(|n| {
            map.get(n)
                .copied()
                .ok_or_else(|| CliError::input(format!("{}: no frame count for '{n}'", path.display())))
        })
        .collect()
}

fn evaluate(a: &EvalArgs, s: &Settings, mode: Mode) -> CliResult<()> {
    let names = row_names(a)?;
    let mut reports = Vec::with_capacity(names.len());
    let mut frames = Vec::with_capacity(names.len());
    for (gt_path, res_path) in a.gts.iter().zip(&a.results) {
        let gt = load_dataset(gt_path, Split::Test)?;
        let text = std::fs::read_to_string(res_path).op(|| format!("reading {}", res_path.display()))?;
        let dets = parse_detections(&text).input(|| res_path.display().to_string())?;
        let report = match mode {
            Mode::Boxes => evaluate_detections(&gt, &dets, &s.eval),
            Mode::Keypoints => evaluate_keypoints(&gt, &dets, &s.eval),
        }
        .input(|| format!("evaluating {} against {}", res_path.display(), gt_path.display()))?;
        frames.push(gt.images.len() as u64);
        reports.push(report);
    }
    if let Some(p) = &a.counts {
        frames = load_counts(p, &names)?;
    }
    let included: Vec<bool> = names.iter().map(|n| !a.exclude.contains(n)).collect();
    let averaged: Vec<(EvalReport, u64)> = reports
        .iter()
        .zip(&frames)
        .zip(&included)
        .filter(|(_, inc)| **inc)
        .map(|((r, f), _)| (r.clone(), *f))
        .collect();
    let weighted = if reports.len() > 1 || a.counts.is_some() {
        Some(weighted_average(&averaged)?)
    } else {
        None
    };

    let rows: Vec<(String, u64, &EvalReport)> = names
        .iter()
        .zip(&frames)
        .zip(&reports)
        .map(|((n, f), r)| (n.clone(), *f, r))
        .collect();
    let table = report_table(&rows, weighted.as_ref());
    print!("{table}");
    if let Some(p) = &a.out {
        std::fs::write(p, &table).op(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.report {
        let doc = ReportDocument {
            sets: rows
                .iter()
                .zip(&included)
                .map(|((name, frames, report), inc)| NamedReport {
                    name,
                    frames: *frames,
                    included_in_average: *inc,
                    report,
                })
                .collect(),
            weighted_average: weighted.as_ref(),
        };
        let mut text = serde_json::to_string_pretty(&doc).map_err(CliError::operational)?;
        text.push('\n');
        std::fs::write(p, text).op(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn eval_det(a: &EvalDetArgs, s: &Settings) -> CliResult<()> {
    evaluate(&a.common, s, Mode::Boxes)
}

pub fn eval_kp(a: &EvalArgs, s: &Settings) -> CliResult<()> {
    evaluate(a, s, Mode::Keypoints)
}
