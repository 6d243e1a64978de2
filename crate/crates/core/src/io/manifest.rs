use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::model::{ModelConfig, ModelWeights};
use crate::train::{TrainConfig, TrainMode};

pub const MANIFEST_VERSION: u32 = 1;

/// Text record stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    /// Checkpoint file name, relative to the manifest.
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    /// Config hash of the dataset the weights were last trained on.
    pub dataset_hash: String,
    pub markers_per_side: usize,
    pub mode: TrainMode,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

/// Writes `<path>` (weights) and `<path>.toml` with extension replaced
/// (manifest), each atomically. The manifest's `checkpoint` and hash fields
/// are filled in here.
pub fn save_model(path: &Path, weights: &ModelWeights<f32>, manifest: &ModelManifest) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &weights.to_named())?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?;
    let mut m = manifest.clone();
    m.format_version = MANIFEST_VERSION;
    m.checkpoint = name.to_string();
    m.checkpoint_sha256 = sha256_hex(&bytes);
    let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
    let mpath = manifest_path(path);
    if mpath == path {
        return Err(Error::InvalidArgument("checkpoint path must not end in .toml".into()));
    }
    write_atomic(path, |w| Ok(std::io::Write::write_all(w, &bytes)?))?;
    write_atomic(&mpath, |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))
}

/// Reads a checkpoint and its manifest, checking the recorded hash and the
/// tensor layout.
pub fn load_model(path: &Path) -> Result<(ModelManifest, ModelWeights<f32>)> {
    let text = std::fs::read_to_string(manifest_path(path))?;
    let manifest: ModelManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.format_version)));
    }
    let bytes = std::fs::read(path)?;
    let found = sha256_hex(&bytes);
    if found != manifest.checkpoint_sha256 {
        return Err(Error::HashMismatch { expected: manifest.checkpoint_sha256.clone(), found });
    }
    let named = read_checkpoint(BufReader::new(File::open(path)?))?;
    let weights = ModelWeights::from_named(&manifest.model, named)?;
    Ok((manifest, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn manifest(model: ModelConfig) -> ModelManifest {
        ModelManifest {
            format_version: 0,
            checkpoint: String::new(),
            checkpoint_sha256: String::new(),
            dataset_hash: "abc".into(),
            markers_per_side: 0,
            mode: TrainMode::Pretrain,
            best_epoch: 3,
            best_val_loss: 1.5,
            model,
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig { edge_widths: vec![4, 4, 4], displacement_widths: vec![8], ..ModelConfig::default() };
        let w = ModelWeights::init(&cfg, &mut Rng::new(3)).unwrap();
        save_model(&path, &w, &manifest(cfg.clone())).unwrap();
        let (m, back) = load_model(&path).unwrap();
        assert_eq!(m.checkpoint, "m.ckpt");
        assert_eq!(m.model, cfg);
        assert_eq!(back.tensors(), w.tensors());
        assert!(dir.path().join("m.toml").exists());
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig { edge_widths: vec![4, 4, 4], displacement_widths: vec![8], ..ModelConfig::default() };
        let w = ModelWeights::init(&cfg, &mut Rng::new(3)).unwrap();
        save_model(&path, &w, &manifest(cfg)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::HashMismatch { .. })));
        assert!(load_model(&dir.path().join("missing.ckpt")).is_err());
    }
}
