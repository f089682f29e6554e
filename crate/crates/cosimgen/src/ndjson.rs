use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{io_err, Result};

/// Newline-delimited JSON writer, flushed after every record.
pub struct NdjsonLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl NdjsonLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self { out: BufWriter::new(f), path: path.to_path_buf() })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self { out: BufWriter::new(f), path: path.to_path_buf() })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(io_err(&self.path))
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(crate::error::format_err))
        .collect()
}
