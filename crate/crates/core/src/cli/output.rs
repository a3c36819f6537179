//! CSV and manifest writers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Comma-separated rows with `\n` line endings, quoted where needed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let line: Vec<String> = row.iter().map(|f| quote(f)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// `inf` for +infinity, shortest round-trip decimal otherwise.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Ordered `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Flattens a TOML value into `prefix.key=value` entries.
    pub fn set_toml(&mut self, prefix: &str, value: &toml::Value) {
        match value {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    self.set_toml(&format!("{prefix}.{k}"), v);
                }
            }
            toml::Value::String(s) => self.set(prefix, s),
            other => self.set(prefix, other),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={}\n", v.replace('\\', "\\\\").replace('\n', "\\n")));
        }
        for (i, p) in self.artifacts.iter().enumerate() {
            out.push_str(&format!("artifact.{i}={}\n", p.display()));
        }
        out
    }

    /// Writes the manifest, listing its own path as the last artifact.
    pub fn write(mut self, path: &Path) -> Result<()> {
        self.artifact(path);
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
