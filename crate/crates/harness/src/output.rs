//! CSV and JSON result files. Every CSV starts with a `# config_hash=` line
//! so a result can be traced back to the configuration that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};

pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, config_hash: &str, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "# config_hash={config_hash}").map_err(|e| HarnessError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush().map_err(|e| HarnessError::io(&self.path, e))?;
        Ok(self.path)
    }
}

/// Full-precision, platform-independent float formatting.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Reads a CSV written by [`CsvOut`], returning `(hash, header, rows)`.
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix("# config_hash=")
        .ok_or_else(|| HarnessError::Output(format!("{}: missing config_hash line", path.display())))?
        .to_string();
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header = reader.headers()?.iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((hash, header, rows))
}
