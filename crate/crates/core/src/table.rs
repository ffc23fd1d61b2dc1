//! Minimal CSV tables with `#`-prefixed metadata lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Table {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Renders the table, preceded by one `# key: value` line per metadata entry.
    pub fn to_csv(&self, metadata: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.columns).expect("writing to memory");
        for row in &self.rows {
            w.write_record(row).expect("writing to memory");
        }
        let bytes = w.into_inner().expect("writing to memory");
        out.push_str(&String::from_utf8(bytes).expect("fields are utf-8"));
        out
    }

    /// Parses text produced by [`Table::to_csv`], returning metadata and table.
    pub fn parse(text: &str) -> Result<(Vec<(String, String)>, Table)> {
        let mut meta = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                break;
            }
            if let Some((k, v)) = trimmed.trim_start_matches('#').trim().split_once(':') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            offset += line.len();
        }
        let rest = &text[offset..];
        let mut r = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
        let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
        if header.is_empty() {
            return Err(Error::Parse("csv has no header row".into()));
        }
        let mut table = Table::new(header.iter());
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            table.rows.push(rec.iter().map(String::from).collect());
        }
        Ok((meta, table))
    }

    pub fn read(path: &Path) -> Result<(Vec<(String, String)>, Table)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Table::parse(&text)
    }
}

/// Shortest round-trip decimal form, so equal values give equal bytes.
pub fn num(x: f64) -> String {
    format!("{x}")
}
