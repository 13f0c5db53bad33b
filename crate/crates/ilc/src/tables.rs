//! Small CSV tables with deterministic formatting.

use std::path::Path;

use crate::error::{Error, Result};

/// Shortest representation that round-trips, so equal values always print
/// the same way.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Rows whose named columns equal the given values.
    pub fn filter(&self, conds: &[(&str, &str)]) -> Vec<&Vec<String>> {
        let idx: Vec<(usize, &str)> = conds
            .iter()
            .filter_map(|(c, v)| self.column(c).map(|i| (i, *v)))
            .collect();
        if idx.len() != conds.len() {
            return Vec::new();
        }
        self.rows.iter().filter(|r| idx.iter().all(|(i, v)| r[*i] == *v)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(String::from).collect());
        }
        Ok(Self { header, rows })
    }

    /// Appends `other`'s rows; headers must agree.
    pub fn extend(&mut self, other: Table) -> Result<()> {
        if self.header.is_empty() {
            *self = other;
            return Ok(());
        }
        if self.header != other.header {
            return Err(Error::Format("tables have different columns".into()));
        }
        self.rows.extend(other.rows);
        Ok(())
    }
}
