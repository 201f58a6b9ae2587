use std::path::{Path, PathBuf};

use aeropose_core::dataset::{
    dataset_stats, filter_person_classes, load_datasets, merge_datasets, stats_table, Split,
};
use clap::Args;

use crate::error::{CliError, CliResult, Context};

const DEFAULT_KEEP: &str = "person";

/// An annotation file with the category names to keep as people.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub path: PathBuf,
    pub keep: Vec<String>,
}

impl std::str::FromStr for InputSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (path, keep) = match s.rsplit_once('=') {
            Some((p, names)) => {
                let keep: Vec<String> = names
                    .split(',')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .map(String::from)
                    .collect();
                if keep.is_empty() {
                    return Err(format!("no class names after '=' in '{s}'"));
                }
                (p, keep)
            }
            None => (s, vec![DEFAULT_KEEP.to_string()]),
        };
        if path.is_empty() {
            return Err(format!("empty path in '{s}'"));
        }
        Ok(Self {
            path: PathBuf::from(path),
            keep,
        })
    }
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Annotation file, optionally followed by `=name1,name2` listing the
    /// categories that count as people (default: person). Repeatable.
    #[arg(long = "input", short, required = true, value_name = "PATH[=CLASSES]")]
    pub inputs: Vec<InputSpec>,

    /// Split shared by all inputs.
    #[arg(long, default_value = "train")]
    pub split: Split,

    /// Merged annotation file.
    #[arg(long, short)]
    pub output: PathBuf,

    /// Id mapping sidecar (default: next to the output, `.idmap.json`).
    #[arg(long, value_name = "PATH")]
    pub id_map: Option<PathBuf>,
}

fn sidecar_path(output: &Path, suffix: &str) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    output.with_file_name(format!("{stem}{suffix}"))
}

fn display_name(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

pub fn merge(a: &MergeArgs) -> CliResult<()> {
    let paths: Vec<(PathBuf, Split)> = a.inputs.iter().map(|i| (i.path.clone(), a.split)).collect();
    let mut parts = Vec::with_capacity(paths.len());
    let mut stats = Vec::new();
    for (spec, loaded) in a.inputs.iter().zip(load_datasets(&paths)) {
        let filtered = filter_person_classes(&loaded?, &spec.keep)?;
        stats.push(dataset_stats(&display_name(&spec.path), &filtered));
        parts.push(filtered);
    }
    let out = merge_datasets(&parts)?;
    out.dataset.save(&a.output)?;
    let map_path = a.id_map.clone().unwrap_or_else(|| sidecar_path(&a.output, ".idmap.json"));
    let mut text = serde_json::to_string_pretty(&out.id_map).map_err(CliError::operational)?;
    text.push('\n');
    std::fs::write(&map_path, text).op(|| format!("writing {}", map_path.display()))?;
    stats.push(dataset_stats("merged", &out.dataset));
    print!("{}", stats_table(&stats));
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Annotation files.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,

    #[arg(long, default_value = "train")]
    pub split: Split,

    /// Also write the statistics as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

pub fn stats(a: &StatsArgs) -> CliResult<()> {
    let paths: Vec<(PathBuf, Split)> = a.files.iter().map(|p| (p.clone(), a.split)).collect();
    let mut stats = Vec::new();
    for (p, loaded) in a.files.iter().zip(load_datasets(&paths)) {
        stats.push(dataset_stats(&display_name(p), &loaded?));
    }
    print!("{}", stats_table(&stats));
    if let Some(path) = &a.json {
        let mut text = serde_json::to_string_pretty(&stats).map_err(CliError::operational)?;
        text.push('\n');
        std::fs::write(path, text).op(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
