//! Resumable run state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use super::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::model::{Episode, GPODEModel};
use crate::planner::Acquisition;

pub const RUN_STATE_SCHEMA_VERSION: u32 = 1;

/// What was measured to produce the episode for a given budget index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Acquired {
    pub theta: Option<Vec<f64>>,
    pub xi: Option<f64>,
    pub truly_safe: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub method: Method,
    pub acquisition: Option<Acquisition>,
    /// Next budget index to train and record.
    pub next_round: usize,
    pub episodes: Vec<Episode>,
    pub records: Vec<MetricsRecord>,
    /// Acquisition that produced the data for `next_round`.
    pub pending: Acquired,
    pub skipped_rounds: usize,
    pub failed_measurements: usize,
    pub training_failures: usize,
    pub elapsed_seconds: f64,
    pub model: Option<GPODEModel>,
}

impl RunState {
    pub fn is_finished(&self) -> bool {
        self.next_round > self.config.budget
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("run state is not valid JSON: {e}")))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == RUN_STATE_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Schema(format!(
                    "run state schema version {v} is not supported (expected {RUN_STATE_SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Schema("run state lacks a schema_version".into())),
        }
        serde_json::from_value(raw).map_err(|e| Error::Schema(format!("malformed run state: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
