//! Checkpoint files: a binary table of named, shape-tagged little-endian f32
//! arrays plus a JSON manifest stored beside it (`<file>.json`).
//!
//! Binary layout: magic `EVCK`, u32 version, u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    /// Identity slots N.
    pub slots: usize,
    /// Matching blocks L.
    pub egmm_blocks: usize,
    /// Voxel bins B.
    pub bins: usize,
    pub seed: u64,
    /// Optimizer steps completed when the checkpoint was written.
    pub iteration: u64,
    pub tool_version: String,
}

impl CheckpointManifest {
    pub fn new(model: &ModelConfig, seed: u64, iteration: u64) -> Self {
        Self {
            model: model.clone(),
            slots: model.slots,
            egmm_blocks: model.egmm_blocks,
            bins: model.bins,
            seed,
            iteration,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_checkpoint(path: &Path, manifest: &CheckpointManifest, tensors: &ParamStore<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors.iter() {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated checkpoint, wanted {n} more bytes"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamStore<f32>)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let at = r.offset;
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Format {
            offset: at,
            message: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok((manifest, store))
}
