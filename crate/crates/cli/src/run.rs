//! Run directories: one command writes one directory, once.
//!
//! A `.lock` file guards the directory while a command runs; every output is
//! created exclusively (never overwritten); on success a `manifest.json`
//! records the resolved config, its hash, the seed, hashes of all inputs and
//! outputs, and the code version. Manifests contain no timestamps, so
//! reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
pub const MANIFEST_SCHEMA: &str = "rimeforge-manifest/1";
pub const CODE_VERSION: &str = concat!("rimeforge-cli ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub code_version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    /// Command-specific arguments (modes, λ values, resume point, ...).
    pub arguments: BTreeMap<String, serde_json::Value>,
    /// Input role → SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    outputs: Vec<String>,
    inputs: BTreeMap<String, String>,
    arguments: BTreeMap<String, serde_json::Value>,
    finished: bool,
}

impl RunDir {
    /// Creates (if needed) and locks `root`. Fails if the directory already
    /// holds a finished run or another command holds the lock.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        if root.join(MANIFEST).exists() {
            bail!("{} already holds a finished run; outputs are write-once", root.display());
        }
        match OpenOptions::new().write(true).create_new(true).open(root.join(LOCK)) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another command ({LOCK} exists)", root.display())
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            root: root.to_path_buf(),
            command: command.into(),
            outputs: Vec::new(),
            inputs: BTreeMap::new(),
            arguments: BTreeMap::new(),
            finished: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Records an input by role with the hash of its content.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn argument(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.arguments.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Opens a new output file; fails if it already exists.
    pub fn create_file(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("creating {} (outputs are never overwritten)", path.display()))?;
        self.outputs.push(rel.into());
        Ok(BufWriter::new(file))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let mut f = self.create_file(rel)?;
        f.write_all(bytes)?;
        f.flush()?;
        Ok(())
    }

    /// Registers a file written by another routine (it must not have
    /// existed before this run).
    pub fn adopt(&mut self, rel: &str) {
        self.outputs.push(rel.into());
    }

    /// Writes the manifest and releases the lock.
    pub fn finish(mut self, cfg: &RunConfig) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA.into(),
            code_version: CODE_VERSION.into(),
            command: self.command.clone(),
            seed: cfg.seed,
            config_sha256: cfg.sha256(),
            config: cfg.clone(),
            arguments: std::mem::take(&mut self.arguments),
            inputs: std::mem::take(&mut self.inputs),
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.path(MANIFEST), text)?;
        self.finished = true;
        fs::remove_file(self.path(LOCK))?;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.finished {
            // Failed run: release the lock but leave partial outputs for
            // inspection; the missing manifest marks the run incomplete.
            let _ = fs::remove_file(self.path(LOCK));
        }
    }
}

/// Appends one JSON object per line.
pub struct JsonLines<W: Write> {
    out: W,
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn push(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_json_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing a line of {}", path.display())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_once_and_locking() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let cfg = RunConfig::default();
        let mut rd = RunDir::create(&root, "test").unwrap();
        assert!(RunDir::create(&root, "test").is_err(), "lock must exclude a second command");
        rd.write("a.txt", b"hello").unwrap();
        assert!(rd.write("a.txt", b"again").is_err());
        let m = rd.finish(&cfg).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert!(!root.join(LOCK).exists());
        assert!(RunDir::create(&root, "test").is_err(), "finished runs are write-once");
        assert_eq!(read_manifest(&root).unwrap(), m);
    }

    #[test]
    fn failed_run_releases_lock() {
        let dir = tempfile::tempdir().unwrap();
        {
            let _rd = RunDir::create(dir.path(), "test").unwrap();
        }
        assert!(RunDir::create(dir.path(), "test").is_ok());
    }
}
