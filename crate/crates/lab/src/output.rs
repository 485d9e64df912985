//! Deterministic text outputs: CSV with 17 significant digits and pretty JSON.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::LabError;

/// Round-trip formatting used for every CSV number.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Rows of a matrix, for readable JSON.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { text: header.join(",") + "\n" }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Writes files under one directory and remembers what was written.
#[derive(Debug)]
pub struct Sink {
    pub dir: PathBuf,
    pub written: Vec<String>,
}

impl Sink {
    pub fn new(dir: &Path) -> Result<Self, LabError> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        Ok(Sink { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn text(&mut self, rel: &str, content: &str) -> Result<(), LabError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        fs::write(&path, content).map_err(|e| LabError::io(&path, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    pub fn csv(&mut self, rel: &str, csv: Csv) -> Result<(), LabError> {
        self.text(rel, &csv.into_string())
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), LabError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(rel, &s)
    }
}
