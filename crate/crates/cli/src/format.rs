//! Versioned on-disk artifacts. Every JSON document carries `schema_version`
//! as `"<major>.<minor>"`; readers reject any other major.

use std::fs;
use std::path::Path;

use cascadev_core::eval::ApResult;
use cascadev_core::{Detection, HeadParams, LossReport, StageTrace, SyntheticScene};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: String,
    pub index: usize,
    pub seed: u64,
    pub scene: SyntheticScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub schema_version: String,
    pub index: usize,
    pub trace: StageTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub schema_version: String,
    pub index: usize,
    /// Stage-ensembled detections in descending score order.
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: String,
    pub config_hash: String,
    pub params: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApReport {
    pub schema_version: String,
    pub num_scenes: usize,
    pub results: Vec<ApResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: String,
    pub command: String,
    pub config_hash: String,
    /// The fully resolved configuration.
    pub config: RunConfig,
    /// Output files relative to the manifest's directory, in write order.
    pub files: Vec<String>,
}

pub trait Versioned {
    fn schema_version(&self) -> &str;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn schema_version(&self) -> &str {
                &self.schema_version
            }
        })*
    };
}
versioned!(
    SceneFile,
    TraceFile,
    DetectionsFile,
    ModelFile,
    ApReport,
    Manifest
);

/// Accepts `"<SCHEMA_MAJOR>"` or `"<SCHEMA_MAJOR>.<anything>"`.
pub fn check_version(found: &str) -> Result<(), CliError> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major == Some(SCHEMA_MAJOR) {
        Ok(())
    } else {
        Err(CliError::Core(cascadev_core::Error::SchemaVersion {
            found: found.to_string(),
            expected: SCHEMA_MAJOR,
        }))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    // Check the version before the body so a future layout reports the
    // version, not a field error.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    match raw.get("schema_version").and_then(|v| v.as_str()) {
        Some(v) => check_version(v)?,
        None => return Err(io_err(path, "missing schema_version")),
    }
    let value: T = serde_json::from_value(raw).map_err(|e| io_err(path, e))?;
    check_version(value.schema_version())?;
    Ok(value)
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}.json")
}

pub fn trace_name(index: usize) -> String {
    format!("trace_{index:04}.json")
}

pub fn detections_name(index: usize) -> String {
    format!("detections_{index:04}.json")
}

/// Loss history as CSV: one row per step, one column group per stage.
pub fn loss_csv(history: &[LossReport]) -> String {
    let stages = history.first().map_or(0, |r| r.stages.len());
    let mut out = String::from("step");
    for l in 1..=stages {
        for col in ["cls", "reg", "ctr", "total", "positives"] {
            out.push_str(&format!(",s{l}_{col}"));
        }
    }
    out.push('\n');
    for r in history {
        out.push_str(&r.step.to_string());
        for s in &r.stages {
            out.push_str(&format!(
                ",{},{},{},{},{}",
                s.cls, s.reg, s.ctr, s.total, s.positives
            ));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_check() {
        assert!(check_version("1.0").is_ok());
        assert!(check_version("1.7").is_ok());
        assert!(check_version("1").is_ok());
        assert!(check_version("2.0").is_err());
        assert!(check_version("x").is_err());
    }

    #[test]
    fn reader_rejects_unknown_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let report = ApReport {
            schema_version: "2.0".into(),
            num_scenes: 0,
            results: vec![],
        };
        write_json(&path, &report).unwrap();
        let err = read_json::<ApReport>(&path).unwrap_err();
        assert!(matches!(
            err,
            CliError::Core(cascadev_core::Error::SchemaVersion { .. })
        ));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn loss_csv_layout() {
        let history = vec![
            LossReport {
                step: 1,
                stages: vec![Default::default(); 3],
            },
            LossReport {
                step: 2,
                stages: vec![Default::default(); 3],
            },
        ];
        let csv = loss_csv(&history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), 1 + 3 * 5);
        assert!(lines[0].starts_with("step,s1_cls"));
        assert_eq!(lines[1].split(',').count(), 1 + 3 * 5);
    }
}
