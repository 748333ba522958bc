//! Output ownership and run manifests.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const LOCK_NAME: &str = ".lungforge.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Directory that holds a file output.
pub fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Manifest path for a file output: `<file>.manifest.json`.
pub fn sibling_manifest(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub subcommand: &'static str,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub status: String,
    pub started_unix_secs: u64,
    pub finished_unix_secs: u64,
    pub runtime_secs: f64,
}

/// Collects what a command did and writes the manifest when finished.
/// Wall-clock fields live only here so every other output is reproducible.
pub struct Run {
    subcommand: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    outputs: Vec<String>,
    started_unix: u64,
    start: Instant,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    pub fn new(subcommand: &'static str, config: impl Serialize, seeds: Vec<u64>) -> Self {
        Self {
            subcommand,
            config: serde_json::to_value(config).expect("configs serialize to JSON"),
            seeds,
            outputs: Vec::new(),
            started_unix: unix_now(),
            start: Instant::now(),
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(self, manifest_path: &Path, status: &str) -> CliResult<()> {
        let manifest = Manifest {
            tool: "lungforge",
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            subcommand: self.subcommand,
            seeds: self.seeds,
            config_hash: config_hash(&self.config),
            config: self.config,
            outputs: self.outputs,
            status: status.to_string(),
            started_unix_secs: self.started_unix,
            finished_unix_secs: unix_now(),
            runtime_secs: self.start.elapsed().as_secs_f64(),
        };
        write_json(manifest_path, &manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize to JSON");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
