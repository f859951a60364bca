//! Results tables: aligned text for the terminal, CSV on disk and a JSON
//! sidecar carrying the run configuration and build id.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// Identifier of the build that produced a results file.
pub fn build_id() -> &'static str {
    env!("CAMML_BUILD_ID")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    /// Space-aligned text with a dashed rule under the header.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: csv::Error| HarnessError::Format(format!("results csv: {e}"));
        let columns = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?;
        Ok(Self { columns, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub command: String,
    pub build: String,
    pub config: RunConfig,
    pub table: Table,
    /// Command-specific raw data (generations, timing samples, ...).
    pub extra: serde_json::Value,
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_results(
    dir: &Path,
    stem: &str,
    command: &str,
    config: &RunConfig,
    table: &Table,
    extra: serde_json::Value,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, table.to_csv()).map_err(|e| HarnessError::io(&csv_path, e))?;
    let sidecar = Sidecar {
        command: command.to_string(),
        build: build_id().to_string(),
        config: config.clone(),
        table: table.clone(),
        extra,
    };
    let json_path = dir.join(format!("{stem}.json"));
    let body = serde_json::to_vec_pretty(&sidecar).map_err(|e| HarnessError::Format(e.to_string()))?;
    std::fs::write(&json_path, body).map_err(|e| HarnessError::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Table::from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_awkward_cells() {
        let mut t = Table::new(["name", "value"]);
        t.push(vec!["a, b".into(), "1.5".into()]);
        t.push(vec!["say \"hi\"".into(), "".into()]);
        let back = Table::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.render(), t.render());
    }

    #[test]
    fn render_aligns_columns() {
        let mut t = Table::new(["n", "ms"]);
        t.push(vec!["16".into(), "0.5".into()]);
        assert_eq!(t.render(), "n   ms\n--  ---\n16  0.5\n");
    }
}
