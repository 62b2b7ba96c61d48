//! Run manifests: what was run, with which effective configuration, and
//! which files it produced.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceEntry {
    pub id: u32,
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// First 16 hex digits of `sha256(command|config_hash|seed|version)`.
    pub manifest_id: String,
    pub command: String,
    pub version: String,
    /// `sha256` of the canonical JSON of `config`.
    pub config_hash: String,
    pub master_seed: u64,
    pub path_seeds: Vec<u64>,
    pub created_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
    pub acceptance: Option<Vec<AcceptanceEntry>>,
    /// Effective configuration after command-line overrides.
    pub config: Option<RunConfig>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn config_hash(config: Option<&RunConfig>) -> String {
    let canonical = serde_json::to_string(&config).expect("configuration serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn manifest_id(command: &str, config_hash: &str, seed: u64) -> String {
    let digest = Sha256::digest(format!("{command}|{config_hash}|{seed}|{VERSION}").as_bytes());
    hex::encode(digest)[..16].to_string()
}

impl RunManifest {
    pub fn start(command: &str, config: Option<RunConfig>, path_seeds: Vec<u64>) -> Self {
        let hash = config_hash(config.as_ref());
        let seed = config.as_ref().map_or(0, |c| c.simulation.seed);
        RunManifest {
            manifest_id: manifest_id(command, &hash, seed),
            command: command.to_string(),
            version: VERSION.to_string(),
            config_hash: hash,
            master_seed: seed,
            path_seeds,
            created_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
            acceptance: None,
            config,
        }
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("no run manifest at {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
