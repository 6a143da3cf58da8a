//! Artifact writing. Every path is relative to one output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliResult;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn sub(&self, name: &str) -> CliResult<OutDir> {
        OutDir::create(&self.root.join(name))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| crate::CliError::runtime(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// One JSON document per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).map_err(|e| crate::CliError::runtime(e.to_string()))?);
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> CliResult<()> {
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let mut f = fs::File::create(self.path(name))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }
}
