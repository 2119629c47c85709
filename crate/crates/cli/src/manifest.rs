use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Reproducibility record written next to every artifact a command produces.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub version: String,
    /// Fingerprint of the model configuration, for commands that emit or read
    /// a checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
    pub wall_clock_secs: f64,
    /// Per-step training loss; empty for other commands.
    pub loss_curve: Vec<f64>,
    /// Hex SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    started: Instant,
    inputs: BTreeMap<String, String>,
    pub model_fingerprint: Option<String>,
    pub loss_curve: Vec<f64>,
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, &e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            started: Instant::now(),
            inputs: BTreeMap::new(),
            model_fingerprint: None,
            loss_curve: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Writes the manifest atomically to `at`.
    pub fn finish(self, at: &Path, outputs: &[PathBuf]) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command,
            config: self.config,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            model_fingerprint: self.model_fingerprint,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            loss_curve: self.loss_curve,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        molalign_core::data::write_atomic(at, text.as_bytes())?;
        Ok(())
    }
}

/// `<artifact>.manifest.json`
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
