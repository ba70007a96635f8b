use std::fs;
use std::path::{Path, PathBuf};

use kvsvd::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::Format;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run, written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub args: Vec<String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// What a command produced: a JSON document, optionally a CSV table, and a
/// short human summary.
pub struct Output {
    pub json: serde_json::Value,
    pub csv: Option<String>,
    pub text: String,
}

impl Output {
    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => Ok(serde_json::to_string_pretty(&self.json)?),
            Format::Text => Ok(self.text.clone()),
            Format::Csv => self.csv.clone().ok_or_else(|| {
                Error::InvalidArgument("this command has no CSV output".into())
            }),
        }
    }
}

/// Files written by one command plus the seeds it consumed.
#[derive(Default)]
pub struct Artifacts {
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Artifacts {
    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn write_json<T: Serialize>(&mut self, dir: &Path, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(dir, name, s.as_bytes())
    }

    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path);
        Ok(())
    }

    /// Container directories count as one output each.
    pub fn container(&mut self, dir: &Path) {
        self.outputs.push(dir.to_path_buf());
    }
}

/// Single-line JSON error for stderr.
pub fn error_line(kind: &str, class: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "class": class, "message": message }).to_string()
}
