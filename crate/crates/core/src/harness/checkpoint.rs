//! Binary checkpoints: magic line, little-endian header length, JSON
//! header, then every parameter as little-endian `f64` in store order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8] = b"MVRGBD-CKPT v1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub val_top1: f64,
    /// `(name, element count)` in store order.
    pub params: Vec<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &RunConfig, epoch: usize, val_top1: f64) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.len()))
            .collect();
        Self {
            header: CheckpointHeader {
                config: config.clone(),
                config_hash: config.hash(),
                epoch,
                val_top1,
                params,
            },
            values: model.store.flatten(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::config(format!("not a checkpoint: {reason}"));
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("magic mismatch"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let (header, data) = rest.split_at(len);
        let header: CheckpointHeader = serde_json::from_slice(header)?;
        let expected: usize = header.params.iter().map(|p| p.1).sum();
        if data.len() != 8 * expected {
            return Err(bad(&format!("{} data bytes for {expected} values", data.len())));
        }
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Rebuilds the model from the stored config and overwrites its
    /// parameters; names and sizes must match.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::new(self.header.config.model.clone(), self.header.config.seed)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let layout: Vec<(String, usize)> = model
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.len()))
            .collect();
        if layout != self.header.params {
            return Err(Error::config("checkpoint parameters do not match the model layout"));
        }
        model.store.load_flat(&self.values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Profile;

    #[test]
    fn bytes_round_trip() {
        let cfg = RunConfig::profile(Profile::Toy);
        let mut model_cfg = cfg.model.clone();
        model_cfg.width = 16;
        model_cfg.attn_heads = 4;
        let cfg = RunConfig { model: model_cfg, ..cfg };
        let model = Model::new(cfg.model.clone(), 3).unwrap();
        let ck = Checkpoint::capture(&model, &cfg, 4, 0.5);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.values, ck.values);
        let restored = back.restore().unwrap();
        assert_eq!(restored.store.flatten(), model.store.flatten());
        assert_eq!(back.digest().unwrap(), ck.digest().unwrap());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let cfg = RunConfig::profile(Profile::Toy);
        let mut model_cfg = cfg.model.clone();
        model_cfg.width = 8;
        model_cfg.attn_heads = 2;
        let model = Model::new(model_cfg, 0).unwrap();
        let mut bytes = Checkpoint::capture(&model, &cfg, 0, 0.0).to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

}
