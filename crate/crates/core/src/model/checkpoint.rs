//! Single-file checkpoints.
//!
//! Layout: the 6-byte magic `LSSAT1`, a little-endian `u64` manifest length,
//! a UTF-8 JSON manifest (preset name, experiment config, parameter names and
//! shapes in storage order), then every parameter's row-major values as
//! little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LssatModel, ParamStore};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LSSAT1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    preset: String,
    config: ExperimentConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub preset: String,
    pub config: ExperimentConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &LssatModel, config: &ExperimentConfig) -> Self {
        Self {
            preset: model.preset().name.clone(),
            config: config.clone(),
            params: model.params().clone(),
        }
    }

    /// Rebuilds the model described by the stored config and loads weights.
    pub fn into_model(self) -> Result<LssatModel> {
        if self.preset != self.config.preset {
            return Err(Error::Checkpoint(format!(
                "manifest preset {} disagrees with config preset {}",
                self.preset, self.config.preset
            )));
        }
        let mut model = LssatModel::from_config(&self.config)?;
        model.params_mut().load_values(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            preset: self.preset.clone(),
            config: self.config.clone(),
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(14 + json.len() + 8 * self.params.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic (not an LSSAT1 file)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut blob = &r[len..];
        let mut params = ParamStore::new();
        for entry in manifest.params {
            let n: usize = entry.shape.iter().product();
            if blob.len() < 8 * n {
                return Err(Error::Checkpoint(format!("{}: truncated values", entry.name)));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blob = &blob[8 * n..];
            params.insert(&entry.name, Tensor::new(entry.shape, data)?);
        }
        if !blob.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", blob.len())));
        }
        Ok(Self {
            preset: manifest.preset,
            config: manifest.config,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 16,
            ..ExperimentConfig::desk_scale()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let cfg = small_config();
        let model = LssatModel::from_config(&cfg).unwrap();
        let ck = Checkpoint::from_model(&model, &cfg);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..6], b"LSSAT1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_model().unwrap(), model);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let cfg = small_config();
        let model = LssatModel::from_config(&cfg).unwrap();
        let bytes = Checkpoint::from_model(&model, &cfg).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn preset_disagreement_rejected() {
        let cfg = small_config();
        let model = LssatModel::from_config(&cfg).unwrap();
        let mut ck = Checkpoint::from_model(&model, &cfg);
        ck.config.preset = "toy-l".into();
        assert!(ck.into_model().is_err());
    }
}
