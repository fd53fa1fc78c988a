//! CSV output for curve data.

use std::path::Path;

use lcmem_core::metrics::RobustnessRow;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::MethodCurve;

/// Dataset column value of macro-averaged rows.
pub const MACRO: &str = "macro";

#[derive(Serialize)]
struct CurveRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<&'a str>,
    dataset: String,
    kind: &'static str,
    strength: f64,
    recall: f64,
    pairs: usize,
}

fn record<'a>(method: Option<&'a str>, row: &RobustnessRow) -> CurveRecord<'a> {
    CurveRecord {
        method,
        dataset: row.dataset.map_or_else(|| MACRO.to_string(), |d| d.to_string()),
        kind: row.kind.name(),
        strength: row.strength,
        recall: row.recall,
        pairs: row.pairs,
    }
}

fn write_records<'a>(path: &Path, records: impl Iterator<Item = CurveRecord<'a>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns `dataset, kind, strength, recall, pairs`.
pub fn write_curve(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    write_records(path, rows.iter().map(|r| record(None, r)))
}

/// Same columns with a leading `method`.
pub fn write_method_curves(path: &Path, curves: &[MethodCurve]) -> Result<()> {
    write_records(path, curves.iter().flat_map(|c| c.rows.iter().map(|r| record(Some(&c.method), r))))
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct CurveRow {
    pub dataset: String,
    pub kind: String,
    pub strength: f64,
    pub recall: f64,
    pub pairs: usize,
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
