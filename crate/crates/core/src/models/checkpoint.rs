//! Versioned binary container for named parameter tensors.
//!
//! Layout, integers little-endian: `b"CPTM"`, `u32` version, 32-byte
//! SHA-256 of the config JSON, `u32` config length and the config JSON
//! bytes, `u32` entry count; per entry `u32` name length, name bytes, `u8`
//! dtype code (1 = f64), `u8` trainable flag, `u32` rank, `rank × u64`
//! dims, then the `f64` payload.

use std::path::Path;
use std::sync::Arc;

use ptm_tensor::{ParamStore, Tensor};

use super::config::ExperimentConfig;
use super::esps::EspsModel;
use super::mspn::MspnModel;
use super::provider::FileEmbeddings;
use crate::crosstalk::CrosstalkMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPTM";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const PRIOR_ENTRY: &str = "crosstalk.prior";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config_json: String,
    pub entries: Vec<CheckpointEntry>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ck_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: &ExperimentConfig, prior: &CrosstalkMatrix) -> Result<Self> {
        let mut entries: Vec<CheckpointEntry> = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.clone(),
            })
            .collect();
        entries.push(CheckpointEntry {
            name: PRIOR_ENTRY.into(),
            trainable: false,
            value: prior.to_tensor(),
        });
        Ok(Self {
            config_hash: config.hash()?,
            config_json: config.to_json()?,
            entries,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(u8::from(e.trainable));
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4).map_err(|_| ck_err("file too short for a checkpoint"))? != MAGIC {
            return Err(ck_err("bad magic bytes"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(ck_err(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
        let n = c.u32()? as usize;
        let config_json = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| ck_err("config is not UTF-8"))?;
        let count = c.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = c.u32()? as usize;
            let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| ck_err("entry name is not UTF-8"))?;
            let dtype = c.u8()?;
            if dtype != DTYPE_F64 {
                return Err(ck_err(format!("unknown dtype code {dtype} for {name}")));
            }
            let trainable = c.u8()? != 0;
            let rank = c.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(c.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = c.take(numel.checked_mul(8).ok_or_else(|| ck_err("entry too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            entries.push(CheckpointEntry {
                name,
                trainable,
                value: Tensor::new(shape, data)?,
            });
        }
        if c.pos != bytes.len() {
            return Err(ck_err("trailing bytes after the last entry"));
        }
        Ok(Self {
            config_hash,
            config_json,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let c = ExperimentConfig::from_json(&self.config_json)?;
        if c.hash()? != self.config_hash {
            return Err(ck_err("stored config does not match its hash"));
        }
        Ok(c)
    }

    /// Compares against an externally supplied config. A mismatch is an
    /// error unless `force`, in which case it is logged.
    pub fn check_config(&self, expected: &ExperimentConfig, force: bool) -> Result<()> {
        if expected.hash()? == self.config_hash {
            return Ok(());
        }
        if force {
            log::warn!("checkpoint config hash differs from the supplied config; proceeding");
            Ok(())
        } else {
            Err(ck_err("checkpoint config hash differs from the supplied config"))
        }
    }

    pub fn prior(&self, labels: Vec<String>) -> Result<CrosstalkMatrix> {
        let t = &self
            .entries
            .iter()
            .find(|e| e.name == PRIOR_ENTRY)
            .ok_or_else(|| ck_err("checkpoint has no crosstalk prior"))?
            .value;
        let c = labels.len();
        if t.shape() != [c, c] {
            return Err(ck_err("crosstalk prior shape differs from the type list"));
        }
        let m = CrosstalkMatrix {
            num_types: c,
            labels,
            npmi: (0..c).map(|i| t.row(i).to_vec()).collect(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Copies every stored value into the same-named parameter.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (id, p) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            let e = self
                .entries
                .iter()
                .find(|e| e.name == p)
                .ok_or_else(|| ck_err(format!("checkpoint lacks parameter {p}")))?;
            if e.value.shape() != store.get(id).shape() {
                return Err(ck_err(format!(
                    "shape of {p} is {:?} in the checkpoint, {:?} in the model",
                    e.value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = e.value.clone();
            store.set_trainable(id, e.trainable);
        }
        Ok(())
    }

    pub fn is_stage2(&self) -> bool {
        self.entries.iter().any(|e| e.name.starts_with("esps."))
    }
}

impl MspnModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(&self.store, &self.config, &self.net.prior)
    }

    pub fn from_checkpoint(ck: &Checkpoint, file: Option<Arc<FileEmbeddings>>) -> Result<Self> {
        let config = ck.config()?;
        let prior = ck.prior(config.types.clone())?;
        let mut model = MspnModel::new(&config, prior, file)?;
        ck.apply(&mut model.store)?;
        Ok(model)
    }
}

impl EspsModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(&self.store, &self.config, &self.stage1.prior)
    }

    pub fn from_checkpoint(ck: &Checkpoint, file: Option<Arc<FileEmbeddings>>) -> Result<Self> {
        if !ck.is_stage2() {
            return Err(ck_err("checkpoint holds no pairing parameters"));
        }
        let config = ck.config()?;
        let prior = ck.prior(config.types.clone())?;
        let stage1 = MspnModel::new(&config, prior, file)?;
        let mut model = EspsModel::from_stage1(&stage1, &config)?;
        ck.apply(&mut model.store)?;
        Ok(model)
    }
}
