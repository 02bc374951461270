//! JSON and JSON-lines output helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, PathContext, Result};

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)).at(path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

/// Append-only JSON-lines file.
#[derive(Debug)]
pub struct JsonLines {
    file: fs::File,
    path: std::path::PathBuf,
}

impl JsonLines {
    /// Starts a fresh file, truncating any previous one.
    pub fn create(path: &Path) -> Result<JsonLines> {
        Ok(JsonLines { file: fs::File::create(path).at(path)?, path: path.to_path_buf() })
    }

    pub fn append(path: &Path) -> Result<JsonLines> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(JsonLines { file, path: path.to_path_buf() })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_string(value).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).at(&self.path)?;
        self.file.flush().at(&self.path)
    }
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
