//! Per-invocation results directory and its manifest.

use std::fs;
use std::path::{Path, PathBuf};

use mgdin::experiment::{ExperimentConfig, CONFIG_VERSION};
use mgdin::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything needed to rerun an invocation: the command line, the seeds and
/// the effective configuration after flag overrides.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub crate_version: String,
    pub config_version: u32,
    pub created: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config: &ExperimentConfig) -> Self {
        Manifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            crate_version: mgdin::VERSION.to_string(),
            config_version: CONFIG_VERSION,
            created: chrono::Local::now().to_rfc3339(),
            seeds: config.training.seeds.clone(),
            config: config.clone(),
        }
    }
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<parent>/<timestamp>-<command>`, adding a counter if a run in
    /// the same second already claimed the name.
    pub fn create(parent: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        for n in 1.. {
            let name = if n == 1 { format!("{stamp}-{command}") } else { format!("{stamp}-{command}-{n}") };
            let path = parent.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(io(&path, e)),
            }
        }
        unreachable!()
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        write_file(&self.path.join(name), contents)
    }

    /// Writes the manifest plus a standalone copy of the effective config,
    /// which `--config` accepts to rerun the invocation.
    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let text = toml::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
        self.write("manifest.toml", text)?;
        self.write("config.toml", manifest.config.to_toml_string()?)?;
        Ok(())
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// File-name-safe form of a variant name (`w/o MG` → `w-o_MG`).
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| match c {
            '/' => '-',
            ' ' => '_',
            c if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' => c,
            _ => '_',
        })
        .collect()
}
