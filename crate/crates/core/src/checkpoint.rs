//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                             |
//! |-------|-----------------------------------------------------|
//! | 8     | magic `TRJDIFF\0`                                   |
//! | 4     | format version, `u32` (currently 1)                 |
//! | 8     | header length `n`, `u64`                            |
//! | n     | UTF-8 JSON header (see [`Header`])                  |
//! | ...   | parameter values as `f64` LE, in header order       |
//!
//! Nothing may follow the last parameter value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::schedule::ScheduleKeys;

pub const MAGIC: &[u8; 8] = b"TRJDIFF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: ScheduleKeys,
    pub params: ParamStore,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    schedule: ScheduleKeys,
    seed: u64,
    step: u64,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            schedule: self.schedule,
            seed: self.seed,
            step: self.step,
            params: self
                .params
                .ids()
                .map(|id| ParamEntry { name: self.params.name(id).to_string(), shape: self.params.value(id).shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in self.params.ids() {
            for v in self.params.value(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).map_err(|_| bad("file too short for magic"))? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len).map_err(|_| bad("header length overflows"))?;
        let header: Header = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        let mut params = ParamStore::new();
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| bad("parameter size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after parameters", bytes.len() - cur.pos)));
        }
        Ok(Self { model: header.model, schedule: header.schedule, params, seed: header.seed, step: header.step })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
