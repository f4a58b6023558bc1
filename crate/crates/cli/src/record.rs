//! Provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    /// Digest over the resolved config and every input file; see [`InputHash`].
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
    pub exit_status: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Git-style content hash: every input is hashed as `blob <len>\0<bytes>`,
/// then `(label, digest)` entries are hashed in label order together with the
/// canonical config, like a tree object. Labels rather than paths enter the
/// digest, so moving a dataset does not change the hash.
#[derive(Default)]
pub struct InputHash {
    entries: Vec<(String, String)>,
    paths: Vec<String>,
}

fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

impl InputHash {
    pub fn add_file(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let bytes =
            std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read input {}: {e}", path.display())))?;
        self.entries.push((label.to_string(), blob_digest(&bytes)));
        self.paths.push(path.display().to_string());
        Ok(())
    }

    pub fn finish(&self, config: &Value) -> String {
        let mut entries = self.entries.clone();
        entries.sort();
        let mut h = Sha256::new();
        h.update(format!("config {}\0", blob_digest(config.to_string().as_bytes())));
        for (name, digest) in entries {
            h.update(format!("{digest} {name}\0"));
        }
        hex::encode(h.finalize())
    }
}

/// Collects what a command did so the record can be written on any exit path.
pub struct Recorder {
    pub command: String,
    pub config: Value,
    pub inputs: InputHash,
    pub outputs: Vec<PathBuf>,
    /// Where the record goes; unset until the output location is known.
    pub record_path: Option<PathBuf>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: Value::Null,
            inputs: InputHash::default(),
            outputs: Vec::new(),
            record_path: None,
            started: Instant::now(),
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes the record if its location is known. Returns the path written.
    pub fn finish(self, result: &Result<(), CliError>) -> Option<PathBuf> {
        let path = self.record_path?;
        let (exit_status, error) = match result {
            Ok(()) => (0, None),
            Err(e) => (e.exit_code(), Some(e.to_string())),
        };
        let record = RunRecord {
            command: self.command,
            argv: std::env::args().collect(),
            input_hash: self.inputs.finish(&self.config),
            inputs: self.inputs.paths.clone(),
            config: self.config,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            exit_status,
            error,
        };
        if let Some(dir) = path.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        match std::fs::write(&path, json) {
            Ok(()) => Some(path),
            Err(e) => {
                eprintln!("warning: could not write run record {}: {e}", path.display());
                None
            }
        }
    }
}
