use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::Table;

use super::config::ScenarioKind;
use crate::error::Result;

/// A summary statistic with its uncertainty.
///
/// `stderr` is the Monte-Carlo standard error; `tolerance` is the acceptance
/// tolerance for deterministic or tolerance-checked quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scalar {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

impl Scalar {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: None, tolerance: None }
    }

    pub fn with_stderr(value: f64, stderr: f64) -> Self {
        Self { value, stderr: Some(stderr), tolerance: None }
    }

    pub fn with_tolerance(value: f64, tolerance: f64) -> Self {
        Self { value, stderr: None, tolerance: Some(tolerance) }
    }
}

/// Named series on a grid; the abscissa is time unless `axis` says otherwise.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Series {
    pub axis: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Series {
    pub fn time(x: Vec<f64>, y: Vec<f64>, stderr: Vec<f64>) -> Self {
        Self { axis: "time".into(), x, y, stderr }
    }

    pub fn exact(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = y.len();
        Self::time(x, y, vec![0.0; n])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub scenario: ScenarioKind,
    pub version: String,
    pub seed: u64,
    pub config: Table,
    pub curves: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub metadata: Metadata,
    pub scalars: BTreeMap<String, Scalar>,
    #[serde(skip)]
    pub curves: BTreeMap<String, Series>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_trajectory: Option<TrajectoryTable>,
}

impl ScenarioResult {
    pub fn scalar(&self, name: &str) -> Option<Scalar> {
        self.scalars.get(name).copied()
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }
}

/// Curve file text: header `<axis>,<name>,<name>_stderr`, one row per point.
pub fn curve_csv(name: &str, series: &Series) -> String {
    let mut out = format!("{},{name},{name}_stderr\n", series.axis);
    for ((x, y), e) in series.x.iter().zip(&series.y).zip(&series.stderr) {
        writeln!(out, "{x:?},{y:?},{e:?}").expect("string write");
    }
    out
}

/// Writes `summary.json` and one `<name>.csv` per curve, overwriting.
pub fn write_results(res: &ScenarioResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let summary = dir.join("summary.json");
    std::fs::write(&summary, res.summary_json())?;
    written.push(summary);
    for (name, series) in &res.curves {
        let path = dir.join(format!("{name}.csv"));
        std::fs::write(&path, curve_csv(name, series))?;
        written.push(path);
    }
    Ok(written)
}
