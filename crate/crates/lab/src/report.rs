//! Experiment results: pass/fail checks, CSV tables and the summary documents.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

/// One tolerance comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable acceptance condition, e.g. `<= 1e-12`.
    pub condition: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            value,
            condition: format!("<= {}", format_f64(max)),
            passed: value <= max,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            value,
            condition: format!(">= {}", format_f64(min)),
            passed: value >= min,
        }
    }

    pub fn greater(name: impl Into<String>, value: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            value,
            condition: format!("> {}", format_f64(min)),
            passed: value > min,
        }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            condition: format!("in [{lo}, {hi}]"),
            passed: lo <= value && value <= hi,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {} ({})", self.name, format_f64(self.value), self.condition)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format_f64(*x),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A CSV table written as `<name>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// RFC 4180 body with CRLF record terminators.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        let out = |e: csv::Error| LabError::Output(e.to_string());
        w.write_record(&self.header).map_err(out)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(out)?;
        }
        w.into_inner().map_err(|e| LabError::Output(e.to_string()))
    }
}

/// Result of one experiment.
#[derive(Debug, Clone)]
pub struct Report {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    /// Kind-specific numbers for the summary (fitted slopes, intervals, diagnostics).
    pub metrics: Map<String, Value>,
}

impl Report {
    pub fn new() -> Self {
        Self {
            checks: Vec::new(),
            tables: Vec::new(),
            metrics: Map::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("metrics serialize");
        self.metrics.insert(key.to_string(), v);
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// `summary.json`: verdict, checks, metrics, the resolved config and the code version.
    pub fn summary(&self, cfg: &ExperimentConfig) -> Value {
        serde_json::json!({
            "kind": cfg.kind.as_str(),
            "version": env!("CARGO_PKG_VERSION"),
            "passed": self.passed(),
            "checks": self.checks,
            "metrics": self.metrics,
            "tables": self.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
            "config": cfg,
        })
    }

    /// Write the tables and `summary.json` into `dir`, plus `run_meta.json` holding `meta`.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path, meta: &Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let put = |name: String, bytes: &[u8]| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))
        };
        for t in &self.tables {
            put(format!("{}.csv", t.name), &t.to_csv()?)?;
        }
        let pretty = |v: &Value| {
            let mut s = serde_json::to_string_pretty(v).expect("json serializes");
            s.push('\n');
            s
        };
        put("summary.json".into(), pretty(&self.summary(cfg)).as_bytes())?;
        put("run_meta.json".into(), pretty(meta).as_bytes())?;
        Ok(())
    }
}

impl Default for Report {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.0, 1.0, -2.5, 1e-12, 123456.789, 3.0e20, 1.0 / 3.0, f64::MIN_POSITIVE] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_quotes_and_terminates() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec![Cell::from("x,y"), Cell::from(1usize)]);
        t.push(vec![Cell::from("say \"hi\""), Cell::from(0.5)]);
        let body = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(body, "a,b\r\n\"x,y\",1\r\n\"say \"\"hi\"\"\",0.5\r\n");
    }

    #[test]
    fn check_conditions() {
        assert!(Check::at_most("a", 1.0, 1.0).passed);
        assert!(!Check::at_most("a", f64::NAN, 1.0).passed);
        assert!(!Check::greater("b", 1.0, 1.0).passed);
        assert!(Check::within("c", -0.5, -0.6, -0.4).passed);
        assert!(!Check::within("c", f64::NAN, -0.6, -0.4).passed);
    }
}
