use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::{sha256_hex, RunConfig};

#[derive(Serialize)]
struct Input {
    name: String,
    sha256: String,
}

/// Provenance record written beside a run's outputs. Paths are reduced to
/// file names and nothing time-dependent is recorded, so identical inputs,
/// config and seed give identical bytes.
#[derive(Serialize)]
pub struct Manifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    seed: u64,
    config_sha256: String,
    config: RunConfig,
    inputs: Vec<Input>,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64, config: &RunConfig) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            seed,
            config_sha256: config.digest(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(Input {
            name: file_name(path),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(file_name(path));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// `<file>.manifest.json` for a single-file output.
pub fn beside(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
