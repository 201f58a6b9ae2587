//! Effective configuration: built-in defaults, overlaid by a TOML file,
//! overlaid by command-line flags.

use std::path::Path;

use aeropose_core::bench::BenchConfig;
use aeropose_core::eval::EvalConfig;
use aeropose_core::pipeline::RunConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult, Context};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Source of all randomness.
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
    pub eval: EvalConfig,
    pub run: RunConfig,
    pub bench: BenchConfig,
}


/// Keys that may appear in a file although the defaults leave them unset.
const OPTIONAL_KEYS: [&str; 1] = ["run.stress"];

fn overlay(base: &mut Table, file: Table, prefix: &str) -> CliResult<()> {
    for (k, v) in file {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            // tagged enums switch variant as a whole
            (Some(slot @ Value::Table(_)), Value::Table(t)) if t.contains_key("kind") => {
                *slot = Value::Table(t)
            }
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, _) => return Err(CliError::input(format!("unknown configuration key '{path}'"))),
        }
    }
    Ok(())
}

impl Settings {
    /// Defaults overlaid with the TOML document `text`.
    pub fn from_toml(text: &str, origin: &str) -> CliResult<Self> {
        let file: Table = toml::from_str(text).input(|| format!("{origin}: invalid TOML"))?;
        let mut base = Table::try_from(Settings::default()).op(|| "serializing defaults".into())?;
        overlay(&mut base, file, "")?;
        Value::Table(base)
            .try_into()
            .input(|| format!("{origin}: invalid configuration"))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).op(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text, &p.display().to_string())
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.eval.validate()?;
        self.run.validate()?;
        if !(self.bench.fps_budget > 0.0) {
            return Err(CliError::input(format!(
                "bench.fps_budget must be positive, got {}",
                self.bench.fps_budget
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }
}
