//! Binary checkpoint: `"FDPC"`, u32 version, u64 metadata length, JSON
//! metadata, then the raw and EMA parameter blobs as little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::unet::{ConditionalUnet1d, NetworkConfig};
use crate::error::{Error, Result};
use crate::policy::{Normalizer, PolicyConfig};

pub const MAGIC: &[u8; 4] = b"FDPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub policy: PolicyConfig,
    pub normalizer: Normalizer,
    pub train_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterStore<f32>,
    pub ema: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for store in [&self.params, &self.ema] {
            for v in store.flat() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let net = ConditionalUnet1d::new(meta.network.clone())?;
        let specs = net.param_specs().clone();
        let n: usize = specs.iter().map(|s| s.len()).sum();
        let blob = &bytes[meta_end..];
        if blob.len() < 8 * n {
            return Err(Error::Checkpoint(format!("truncated parameter blob: {} of {} bytes", blob.len(), 8 * n)));
        }
        if blob.len() > 8 * n {
            return Err(bad("trailing bytes after parameter blob"));
        }
        let read = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let params = ParameterStore::from_parts(specs.clone(), read(&blob[..4 * n]));
        let ema = ParameterStore::from_parts(specs, read(&blob[4 * n..]));
        Ok(Self { meta, params, ema })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
