//! Artifact writers. Numbers carry 17 significant digits so the files
//! reproduce the in-memory values exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A CSV table whose first line is `# schema: <name>/<version>`.
pub struct Table {
    schema: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    footer: Vec<String>,
}

impl Table {
    pub fn new(schema: &str, header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            schema: format!("{schema}/{SCHEMA_VERSION}"),
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
            footer: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Comment line after the rows.
    pub fn footer(&mut self, line: impl Into<String>) {
        self.footer.push(line.into());
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut buf = format!("# schema: {}\n", self.schema).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut put = |r: &[String]| {
                w.write_record(r)
                    .map_err(|e| io_err(path)(std::io::Error::other(e)))
            };
            put(&self.header)?;
            for r in &self.rows {
                put(r)?;
            }
            w.flush().map_err(io_err(path))?;
        }
        for f in &self.footer {
            writeln!(buf, "# {f}").map_err(io_err(path))?;
        }
        fs::write(path, buf).map_err(io_err(path))
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| io_err(path)(std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn artifact(dir: &Path, prefix: &str, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir.join(format!("{prefix}.{name}")))
}
