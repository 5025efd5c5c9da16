//! Lineage records written next to every artifact, and the output-directory
//! lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use clinforge_core::model::fnv1a64;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FORMAT: &str = "CLF1";
pub const SHARD_FORMAT: &str = "clinforge-shard-v1";

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<&'static str, &'static str>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        let versions = BTreeMap::from([
            ("clinforge", TOOL_VERSION),
            ("checkpoint", CHECKPOINT_FORMAT),
            ("shard", SHARD_FORMAT),
            ("chat_template", clinforge_core::eval::DEFAULT_TEMPLATE_ID),
        ]);
        Self { command: command.into(), seed, config_hash, inputs: BTreeMap::new(), outputs: BTreeMap::new(), versions }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    /// Writes `<stem>.provenance.json` beside `artifact`.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let path = artifact.with_extension("provenance.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutLock {
    path: PathBuf,
}

impl OutLock {
    pub const FILE: &'static str = ".clinforge.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(Self::FILE);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                anyhow::bail!("{} is locked by another run (remove {} if stale)", dir.display(), path.display())
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
        };
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
