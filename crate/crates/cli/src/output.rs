//! Atomic artifact writes and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
    let fail = |e: std::io::Error| CliError::runtime(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of one blob, framed like a git object.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub name: String,
    pub hash: String,
}

/// Seconds spent in each phase of a command. The only part of a manifest
/// that differs between identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
    pub total: f64,
}

/// Everything needed to repeat a command and check that it produced the
/// same outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Effective settings after defaults, files and overrides are merged.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    /// Hash over the input hashes in order.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub timings: Timings,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    start: Instant,
    phase_start: Instant,
    phases: Vec<(String, f64)>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        let now = Instant::now();
        ManifestBuilder {
            command: command.into(),
            config: serde_json::Value::Null,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: now,
            phase_start: now,
            phases: Vec::new(),
        }
    }

    pub fn config(&mut self, config: &impl Serialize) -> CliResult<()> {
        self.config = serde_json::to_value(config).map_err(|e| CliError::runtime(e.to_string()))?;
        Ok(())
    }

    pub fn input(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.inputs.push(InputRecord {
            name: name.into(),
            hash: blob_hash(bytes),
        });
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Closes the current phase under `name`.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.push((name.into(), (now - self.phase_start).as_secs_f64()));
        self.phase_start = now;
    }

    pub fn finish(self) -> RunManifest {
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(i.name.as_bytes());
            h.update([0]);
            h.update(i.hash.as_bytes());
        }
        RunManifest {
            tool: "isoform".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            argv: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            input_hash: hex(&h.finalize()),
            outputs: self.outputs,
            timings: Timings {
                phases: self.phases,
                total: self.start.elapsed().as_secs_f64(),
            },
        }
    }

    pub fn write(self, path: &Path) -> CliResult<()> {
        let m = self.finish();
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::runtime(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        // sha256 of "blob 0\0"
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"first version").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn sibling_appends() {
        assert_eq!(sibling(Path::new("a/b.off"), ".stats.json"), PathBuf::from("a/b.off.stats.json"));
    }
}
