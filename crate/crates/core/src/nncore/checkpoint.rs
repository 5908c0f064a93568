//! Checkpoints are a JSON manifest plus a sibling `.bin` file holding every
//! parameter as little-endian `f64`, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, NnError};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub param_shapes: Vec<Vec<usize>>,
    pub param_count: usize,
    pub seed: u64,
    pub epoch: usize,
    pub params_file: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn params_path(manifest: &Path) -> Result<PathBuf, NnError> {
    if manifest.extension().is_some_and(|e| e == "bin") {
        return Err(NnError::Checkpoint(format!(
            "{} would collide with its parameter file",
            manifest.display()
        )));
    }
    Ok(manifest.with_extension("bin"))
}

pub fn save_checkpoint(
    net: &Network,
    path: &Path,
    seed: u64,
    epoch: usize,
    extra: serde_json::Value,
) -> Result<CheckpointManifest, NnError> {
    let bin = params_path(path)?;
    let params = net.params();
    let mut bytes = Vec::with_capacity(net.param_count() * 8);
    for p in &params {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        input_shape: net.input_shape().to_vec(),
        layers: net.specs(),
        param_shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        param_count: net.param_count(),
        seed,
        epoch,
        params_file: bin
            .file_name()
            .expect("derived from a file path")
            .to_string_lossy()
            .into_owned(),
        extra,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointManifest), NnError> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(NnError::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let bin = path.with_file_name(&manifest.params_file);
    let bytes = fs::read(&bin)?;
    let mut net = Network::new(&manifest.input_shape, &manifest.layers, manifest.seed)?;
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    if shapes != manifest.param_shapes {
        return Err(NnError::Checkpoint("parameter shapes disagree with layer specs".into()));
    }
    if bytes.len() != net.param_count() * 8 {
        return Err(NnError::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            bin.display(),
            bytes.len(),
            net.param_count() * 8
        )));
    }
    let mut chunks = bytes.chunks_exact(8);
    for p in net.params_mut() {
        for v in p.data_mut() {
            let raw = chunks.next().expect("length checked above");
            *v = f64::from_le_bytes(raw.try_into().expect("8-byte chunk"));
        }
    }
    Ok((net, manifest))
}
