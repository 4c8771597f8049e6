//! CSV tables and JSON run reports.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Format;
use crate::data::csv_io;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
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

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// One CSV file, written as `<name>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new(name: &str, header: &[&str]) -> Self {
        CsvTable { name: name.to_string(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        w.write_record(&self.header).map_err(|e| csv_io(&path, e))?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(|e| csv_io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// What one invocation produced: a JSON document and its tables.
#[derive(Debug, Clone)]
pub struct Output {
    pub name: String,
    pub json: serde_json::Value,
    pub tables: Vec<CsvTable>,
}

impl Output {
    pub fn new(name: &str, json: impl Serialize) -> Result<Self> {
        let json = serde_json::to_value(json).map_err(|e| CliError::Numeric(format!("cannot serialise report: {e}")))?;
        Ok(Output { name: name.to_string(), json, tables: Vec::new() })
    }

    /// Writes the requested formats into `dir` and returns the files written.
    pub fn write(&self, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        if formats.contains(&Format::Json) {
            let path = dir.join(format!("{}.json", self.name));
            let text = serde_json::to_string_pretty(&self.json).expect("values serialise");
            std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
            written.push(path);
        }
        if formats.contains(&Format::Csv) {
            for table in &self.tables {
                written.push(table.write(dir)?);
            }
        }
        Ok(written)
    }
}

/// Mean of per-seed values, reported next to them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStat {
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl SeedStat {
    pub fn new(per_seed: Vec<f64>) -> Self {
        let mean = if per_seed.is_empty() { f64::NAN } else { per_seed.iter().sum::<f64>() / per_seed.len() as f64 };
        SeedStat { per_seed, mean }
    }
}
