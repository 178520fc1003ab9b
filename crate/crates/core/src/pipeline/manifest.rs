use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub counts: BTreeMap<String, u64>,
    /// Wall-clock time; the only field that differs between identical runs.
    pub wall_ms: f64,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub model: String,
    /// Config key → file digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → digest.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: String, seed: u64, model: &str) -> RunManifest {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256,
            seed,
            model: model.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stages: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn stage(&mut self, name: &str, started: Instant, counts: &[(&str, usize)]) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            counts: counts.iter().map(|(k, v)| (k.to_string(), *v as u64)).collect(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// The manifest with timings zeroed, for comparing two runs.
    pub fn without_timings(&self) -> RunManifest {
        let mut m = self.clone();
        for s in &mut m.stages {
            s.wall_ms = 0.0;
        }
        m
    }
}
