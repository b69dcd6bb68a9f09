//! The persisted summary of a finished run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{GeometryReport, SessionResult};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Run identifier of a config; reruns of one config share it.
pub fn run_id(config: &ExperimentConfig) -> String {
    format!("run-{}", &config.hash()[..12])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub library_version: String,
    pub config: ExperimentConfig,
    pub sessions: Vec<SessionResult>,
    pub geometry: Vec<GeometryReport>,
    pub wall_clock: WallClock,
}

impl ExperimentRecord {
    pub fn new(config: &ExperimentConfig, sessions: Vec<SessionResult>, geometry: Vec<GeometryReport>, wall_clock: WallClock) -> Self {
        let config_hash = config.hash();
        ExperimentRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            run_id: run_id(config),
            config_hash,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            sessions,
            geometry,
            wall_clock,
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.sessions.last().map(|s| s.total_accuracy)
    }

    /// The record as JSON with wall-clock metadata removed, for comparing
    /// runs.
    pub fn content_without_wall_clock(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_clock");
        }
        Ok(serde_json::to_string(&v)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a record, refusing other schema versions.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == RECORD_SCHEMA_VERSION as u64 => {}
            other => {
                return Err(Error::VersionMismatch(format!(
                    "{} has schema version {other:?}, expected {RECORD_SCHEMA_VERSION}",
                    path.display()
                )))
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_predictions;

    fn record() -> ExperimentRecord {
        let r = evaluate_predictions(0, &[0, 1], &[0, 1, 1], &[0, 1, 0], &[0, 1]).unwrap();
        ExperimentRecord::new(
            &ExperimentConfig::default(),
            vec![r],
            vec![],
            WallClock { started_unix_ms: 1, finished_unix_ms: 2 },
        )
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        let rec = record();
        rec.save(&path).unwrap();
        assert_eq!(ExperimentRecord::load(&path).unwrap(), rec);
        assert!(rec.run_id.starts_with("run-"));
    }

    #[test]
    fn wall_clock_is_excluded_from_content() {
        let a = record();
        let mut b = a.clone();
        b.wall_clock.finished_unix_ms = 99;
        assert_eq!(a.content_without_wall_clock().unwrap(), b.content_without_wall_clock().unwrap());
        b.sessions[0].total_accuracy = 0.0;
        assert_ne!(a.content_without_wall_clock().unwrap(), b.content_without_wall_clock().unwrap());
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        let mut v = serde_json::to_value(record()).unwrap();
        v["schema_version"] = 99.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(ExperimentRecord::load(&path), Err(Error::VersionMismatch(_))));
    }
}
