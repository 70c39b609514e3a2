//! Append-only experiment traces and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ApdmError, Result};
use crate::evaluation::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTrace {
    pub stage: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub checkpoints: Vec<String>,
    pub metrics: Vec<MetricReport>,
}

impl ExperimentTrace {
    pub fn new(stage: impl Into<String>, columns: &[&str]) -> Self {
        ExperimentTrace {
            stage: stage.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            checkpoints: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the trace columns");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format_value(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(stage: &str, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut trace = ExperimentTrace {
            stage: stage.to_string(),
            columns,
            rows: Vec::new(),
            checkpoints: Vec::new(),
            metrics: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| ApdmError::usage(format!("bad CSV value {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            trace.push(row);
        }
        Ok(trace)
    }
}

/// Shortest representation that parses back to the same `f64`; integral
/// values print without a fractional part so step columns read naturally.
pub fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}
