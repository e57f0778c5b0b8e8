//! Run manifests and the atomic output-directory contract.
//!
//! A command stages its outputs in `<out>.partial/`, writes `manifest.json`
//! last, and renames the staging directory onto `<out>`. A directory without
//! a manifest is therefore an interrupted run and is discarded on the next
//! attempt.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputEntry>,
    pub format_versions: BTreeMap<String, u32>,
    /// Unix seconds.
    pub started_at: f64,
    pub finished_at: f64,
    /// Hash over the sorted output entries; equal across byte-identical reruns.
    pub content_hash: String,
    /// Free-form run facts (timings, verification results).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> std::io::Result<Self> {
        let s = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON rendering of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("config serializes").as_bytes())
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// An output directory being written.
pub struct StagedOutput {
    final_dir: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
    started_at: f64,
}

impl StagedOutput {
    pub fn begin(out: &Path) -> std::io::Result<Self> {
        let staging = staging_path(out);
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        // A previous run that never wrote its manifest is discarded.
        if out.exists() && !out.join(MANIFEST_FILE).exists() {
            fs::remove_dir_all(out)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self {
            final_dir: out.to_path_buf(),
            staging,
            files: Vec::new(),
            started_at: unix_now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    /// Hashes the outputs, writes the manifest, and moves the directory into place.
    pub fn commit(
        mut self,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: Vec<String>,
        format_versions: BTreeMap<String, u32>,
        notes: BTreeMap<String, serde_json::Value>,
    ) -> std::io::Result<RunManifest> {
        self.files.sort();
        let mut outputs = Vec::new();
        for f in &self.files {
            let bytes = fs::read(self.staging.join(f))?;
            outputs.push(OutputEntry {
                path: f.clone(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        let content_hash = sha256_hex(serde_json::to_string(&outputs).expect("entries serialize").as_bytes());
        let manifest = RunManifest {
            manifest_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            config_hash: config_hash(&config),
            config,
            seed,
            inputs,
            outputs,
            format_versions,
            started_at: self.started_at,
            finished_at: unix_now(),
            content_hash,
            notes,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.staging.join(MANIFEST_FILE), json.as_bytes())?;
        if self.final_dir.exists() {
            fs::remove_dir_all(&self.final_dir)?;
        }
        fs::rename(&self.staging, &self.final_dir)?;
        Ok(manifest)
    }
}

pub fn staging_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    out.with_file_name(name)
}
