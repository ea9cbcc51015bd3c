//! Append-only CSV loss logs.

use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};

pub struct LossLog {
    writer: csv::Writer<File>,
    columns: usize,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Training(format!("{}: {e}", path.display()))
}

impl LossLog {
    /// Starts a fresh log, or on resume keeps the rows whose step is below
    /// `keep_below` and appends after them.
    pub fn open(path: &Path, header: &[String], keep_below: Option<usize>) -> Result<Self> {
        let kept = match keep_below {
            Some(limit) if path.exists() => {
                let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
                let old: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
                if old != header {
                    return Err(Error::Training(format!(
                        "{}: log columns differ from this configuration",
                        path.display()
                    )));
                }
                let mut rows = Vec::new();
                for rec in r.records() {
                    let rec = rec.map_err(|e| csv_err(path, e))?;
                    let step: usize = rec
                        .get(0)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Training(format!("{}: bad step column", path.display())))?;
                    if step < limit {
                        rows.push(rec);
                    }
                }
                rows
            }
            _ => Vec::new(),
        };
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(|e| csv_err(path, e))?;
        for rec in &kept {
            writer.write_record(rec).map_err(|e| csv_err(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer,
            columns: header.len(),
        })
    }

    /// Writes one row; `None` cells stay empty.
    pub fn row(&mut self, cells: &[Option<f64>], step: usize) -> Result<()> {
        debug_assert_eq!(cells.len() + 1, self.columns);
        let mut rec = vec![step.to_string()];
        rec.extend(cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
        self.writer
            .write_record(&rec)
            .map_err(|e| Error::Training(format!("log: {e}")))?;
        self.writer.flush().map_err(|e| Error::Training(format!("log: {e}")))
    }
}

/// Reads a log back as a header and rows of optional numbers.
pub fn read_log(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(
            rec.iter()
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse().map(Some) })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Training(format!("{}: {e}", path.display())))?,
        );
    }
    Ok((header, rows))
}
