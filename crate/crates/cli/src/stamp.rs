//! Content-hash stamps that let a stage skip work when nothing it depends on
//! has changed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct StampFile {
    stage: String,
    key: String,
    outputs: BTreeMap<String, String>,
}

/// A stage's identity: its name, parameters and the content of its inputs.
/// Only file names and digests are recorded, so stamps do not depend on
/// where the work directory lives.
pub struct Stage {
    name: String,
    key: String,
    outputs: Vec<PathBuf>,
}

impl Stage {
    pub fn new<P: Serialize>(name: &str, params: &P, inputs: &[&Path], outputs: &[&Path]) -> Result<Self, CliError> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(params)?);
        for input in inputs {
            h.update([0]);
            h.update(sha256_file(input)?.as_bytes());
        }
        Ok(Self {
            name: name.to_string(),
            key: hex::encode(h.finalize()),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
        })
    }

    fn stamp_path(&self) -> PathBuf {
        let first = &self.outputs[0];
        first.with_file_name(format!("{}.stamp", file_name(first)))
    }

    /// True when a stamp with the same key exists and every output still
    /// has the digest recorded in it.
    pub fn is_fresh(&self) -> bool {
        let Ok(text) = fs::read_to_string(self.stamp_path()) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_str::<StampFile>(&text) else {
            return false;
        };
        if stamp.key != self.key || stamp.outputs.len() != self.outputs.len() {
            return false;
        }
        self.outputs.iter().all(|p| {
            stamp
                .outputs
                .get(&file_name(p))
                .is_some_and(|d| sha256_file(p).is_ok_and(|actual| &actual == d))
        })
    }

    pub fn record(&self) -> Result<(), CliError> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(file_name(p), sha256_file(p)?);
        }
        let stamp = StampFile {
            stage: self.name.clone(),
            key: self.key.clone(),
            outputs,
        };
        let path = self.stamp_path();
        fs::write(&path, serde_json::to_string_pretty(&stamp)? + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Runs `work` unless the stage is fresh. Returns whether it ran.
    pub fn run(&self, work: impl FnOnce() -> Result<(), CliError>) -> Result<bool, CliError> {
        if self.is_fresh() {
            log::info!("{}: up to date, skipping", self.name);
            return Ok(false);
        }
        for p in &self.outputs {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
        }
        work()?;
        self.record()?;
        Ok(true)
    }
}
