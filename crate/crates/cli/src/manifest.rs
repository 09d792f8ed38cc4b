//! Run records: everything needed to reproduce a command byte for byte.

use std::fs;
use std::path::Path;

use calibra_core::calibrate::PsrfReport;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Em,
    Impute,
    Pool,
    Check,
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Em,
    Da,
    Srmi,
    Monotone,
    Pspp,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

/// The arguments of one run. Paths are stored absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: CommandKind,
    pub seed: u64,
    pub input: Option<String>,
    pub input_sha256: Option<String>,
    pub method: Option<MethodArg>,
    pub d: Option<usize>,
    pub level: Option<f64>,
    pub nu_com: Option<f64>,
    #[serde(default)]
    pub discrepancies: Vec<String>,
    /// Verbatim configuration file contents.
    pub config: Option<String>,
    pub config_sha256: String,
}

impl RunRecord {
    pub fn new(command: CommandKind, seed: u64) -> Self {
        RunRecord {
            command,
            seed,
            input: None,
            input_sha256: None,
            method: None,
            d: None,
            level: None,
            nu_com: None,
            discrepancies: Vec::new(),
            config: None,
            config_sha256: sha256_hex(b""),
        }
    }

    pub fn set_input(&mut self, path: &Path) -> Result<(), String> {
        let bytes = read(path)?;
        let abs = fs::canonicalize(path).map_err(|e| format!("cannot resolve {}: {e}", path.display()))?;
        self.input = Some(abs.to_string_lossy().into_owned());
        self.input_sha256 = Some(sha256_hex(&bytes));
        Ok(())
    }

    pub fn set_config(&mut self, path: Option<&Path>) -> Result<(), String> {
        if let Some(p) = path {
            let bytes = read(p)?;
            let text = String::from_utf8(bytes).map_err(|_| format!("{} is not UTF-8", p.display()))?;
            self.config_sha256 = sha256_hex(text.as_bytes());
            self.config = Some(text);
        }
        Ok(())
    }

    pub fn input_path(&self) -> Result<&Path, String> {
        self.input
            .as_deref()
            .map(Path::new)
            .ok_or_else(|| "this command needs an input file".to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub run: RunRecord,
    pub outputs: Vec<String>,
    pub rhat: Option<PsrfReport>,
    pub warnings: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), String> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| e.to_string())?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, String> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format!("malformed manifest {}: {e}", path.display()))
}

/// Loads the run record from a manifest and verifies that the recorded
/// input and configuration are unchanged.
pub fn load_for_replay(path: &Path) -> Result<RunRecord, String> {
    let run = read_manifest(path)?.run;
    if let (Some(input), Some(hash)) = (&run.input, &run.input_sha256) {
        if sha256_hex(&read(Path::new(input))?) != *hash {
            return Err(format!("input {input} changed since the recorded run"));
        }
    }
    let config_hash = sha256_hex(run.config.as_deref().unwrap_or("").as_bytes());
    if config_hash != run.config_sha256 {
        return Err("recorded configuration does not match its hash".into());
    }
    Ok(run)
}
