use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use blockdep::harness::{write_csv, Cell};
use blockdep::Result;
use serde::Serialize;

pub const RESULT: &str = "result.json";
pub const SAMPLES: &str = "samples.csv";
pub const TRACE: &str = "trace.csv";

/// Output directory with the three standard files.
pub struct OutDir {
    dir: PathBuf,
}

pub struct Table<'a> {
    pub header: &'a [&'a str],
    pub rows: Vec<Vec<Cell>>,
}

impl<'a> Table<'a> {
    pub fn new(header: &'a [&'a str]) -> Self {
        Table { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutDir { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes all three files.
    pub fn write<T: Serialize>(&self, result: &T, samples: &Table, trace: &Table) -> Result<()> {
        let mut json = serde_json::to_string_pretty(result)?;
        json.push('\n');
        fs::write(self.path(RESULT), json)?;
        for (name, table) in [(SAMPLES, samples), (TRACE, trace)] {
            let file = BufWriter::new(fs::File::create(self.path(name))?);
            write_csv(file, table.header, &table.rows)?;
        }
        Ok(())
    }
}
