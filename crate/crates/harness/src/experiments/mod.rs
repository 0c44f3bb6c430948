//! Reproduction experiments. Each `run` returns a report and, given a
//! [`Sink`] with a directory, writes its CSV and JSON files there.

pub mod angle;
pub mod anti_hebbian;
pub mod apical_slope;
pub mod assembly;
pub mod traces;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::{write_json, CsvOut};

/// Where experiment output goes.
#[derive(Debug, Clone)]
pub struct Sink {
    dir: Option<PathBuf>,
    hash: String,
}

impl Sink {
    pub fn new(dir: impl Into<PathBuf>, hash: impl Into<String>) -> Self {
        Self {
            dir: Some(dir.into()),
            hash: hash.into(),
        }
    }

    /// Discards all output.
    pub fn none() -> Self {
        Self {
            dir: None,
            hash: String::new(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn csv(&self, name: &str, header: &[&str]) -> Result<Option<CsvOut>> {
        self.dir
            .as_ref()
            .map(|d| CsvOut::create(&d.join(name), &self.hash, header))
            .transpose()
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        match &self.dir {
            Some(d) => write_json(&d.join(name), value),
            None => Ok(()),
        }
    }
}

pub const IDS: [&str; 5] = ["apical_slope", "anti_hebbian", "assembly", "angle", "microcircuit_traces"];

/// Runs experiment `id` and returns its JSON summary.
pub fn run_by_id(id: &str, cfg: &ExperimentConfig, sink: &Sink) -> Result<serde_json::Value> {
    let value = match id {
        "apical_slope" => serde_json::to_value(apical_slope::run(&cfg.apical_slope, cfg.seed, sink)?)?,
        "anti_hebbian" => serde_json::to_value(anti_hebbian::run(&cfg.anti_hebbian, cfg.seed, sink)?)?,
        "assembly" => serde_json::to_value(assembly::run(&cfg.assembly, cfg.seed, sink)?)?,
        "angle" => serde_json::to_value(angle::run(cfg, sink)?)?,
        "microcircuit_traces" => serde_json::to_value(traces::run(&cfg.traces, cfg.seed, sink)?)?,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown experiment {other:?}; expected one of {}",
                IDS.join(", ")
            )))
        }
    };
    Ok(value)
}
