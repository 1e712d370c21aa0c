//! Output directories: a lock against concurrent writers, atomic file
//! writes and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const LOCK_FILE: &str = ".stformer.lock";
pub const OUT_ROOT_ENV: &str = "STFORMER_OUT_ROOT";

/// `--out` if given, else `$STFORMER_OUT_ROOT/<command>`, else
/// `runs/<command>`.
pub fn out_path(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub dataset_hash: Option<String>,
    pub code_version: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

/// A locked output directory. The lock is released on drop.
pub struct OutDir {
    pub path: PathBuf,
    command: String,
    started: Instant,
    started_unix: u64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    seeds: BTreeMap<String, u64>,
    dataset_hash: Option<String>,
}

impl OutDir {
    pub fn open(path: PathBuf, command: &str) -> Result<Self> {
        fs::create_dir_all(&path).map_err(io_err(&path))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(path)),
            Err(e) => return Err(io_err(lock)(e)),
        }
        Ok(Self {
            path,
            command: command.to_string(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            dataset_hash: None,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<String> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileRecord {
            path: path.display().to_string(),
            sha256: sha256.clone(),
        });
        Ok(sha256)
    }

    pub fn dataset(&mut self, path: &Path) -> Result<()> {
        self.dataset_hash = Some(self.input(path)?);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    /// Writes `name` via a temporary file and a rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write_with(name, |tmp| {
            let mut f = File::create(tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            Ok(())
        })
    }

    /// Lets `fill` write a temporary path, then renames it to `name`.
    pub fn write_with(&mut self, name: &str, fill: impl FnOnce(&Path) -> std::result::Result<(), stformer::Error>) -> Result<()> {
        let target = self.path.join(name);
        let tmp = self.path.join(format!(".{name}.tmp"));
        if let Err(e) = fill(&tmp) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        fs::rename(&tmp, &target).map_err(io_err(&target))?;
        self.outputs.push(FileRecord {
            path: name.to_string(),
            sha256: sha256_file(&target)?,
        });
        Ok(())
    }

    /// Writes `manifest-<command>.json` last, so its presence marks a
    /// finished run.
    pub fn finish(mut self, config: &impl Serialize) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            args: std::env::args().collect(),
            config: serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?,
            seeds: std::mem::take(&mut self.seeds),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            dataset_hash: self.dataset_hash.take(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_secs: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let name = format!("manifest-{}.json", self.command);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        self.write(&name, text.as_bytes())?;
        Ok(self.path.join(name))
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}
