//! Per-residue embedding providers.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ptm_tensor::rng::StreamRng;
use ptm_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::blocks::{zero_padding, BatchLayout, LayerNorm, LoraConfig, TransformerLayer};
use crate::error::{data_err, Error, Result};
use crate::residues::{physchem_table, PAD_TOKEN, VOCAB};

/// `pe[p][2i] = sin(p/10000^(2i/d))`, `pe[p][2i+1] = cos(·)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    Tensor::from_fn([len, d], |k| {
        let (p, j) = (k / d, k % d);
        let freq = 1.0 / 10000f64.powf((j - j % 2) as f64 / d as f64);
        let angle = p as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Small transformer encoder standing in for a pretrained protein language
/// model. Its base weights are frozen; only the q/k/v adapters train.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub d: usize,
}

impl ToyEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        d: usize,
        heads: usize,
        num_layers: usize,
        ff_hidden: usize,
        lora: &LoraConfig,
    ) -> Self {
        let table = Tensor::from_fn([VOCAB, d], |i| {
            if i / d == PAD_TOKEN {
                0.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let embedding = store.add("encoder.embedding", table, false);
        let layers = (0..num_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    rng,
                    &format!("encoder.layer{i}"),
                    d,
                    heads,
                    ff_hidden,
                    false,
                    Some(lora),
                )
            })
            .collect();
        Self {
            embedding,
            layers,
            final_norm: LayerNorm::new(store, "encoder.final_norm", d, false),
            d,
        }
    }

    /// Token embedding rows `[n·l × d]` for a padded token batch.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let table = g.param(self.embedding);
        Ok(g.tape.gather_rows(table, tokens)?)
    }

    /// Encodes from already-embedded tokens (positions are added here).
    pub fn encode(&self, g: &mut Graph, embedded: Var, layout: &BatchLayout, use_adapters: bool) -> Result<Var> {
        let pe = sinusoidal_positions(layout.l, self.d);
        let mut tiled = Vec::with_capacity(layout.n * layout.l * self.d);
        for _ in 0..layout.n {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.input(Tensor::new([layout.n * layout.l, self.d], tiled)?);
        let mut h = g.tape.add(embedded, pe)?;
        h = zero_padding(g, h, layout)?;
        for layer in &self.layers {
            h = layer.forward(g, h, layout, None, use_adapters)?;
        }
        let h = self.final_norm.forward(g, h)?;
        zero_padding(g, h, layout)
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.adapter_params()).collect()
    }
}

/// `[n·l × 4]` normalized physicochemical descriptors for a token batch.
pub fn physchem_features(tokens: &[usize]) -> Tensor {
    let table = physchem_table();
    Tensor::from_fn([tokens.len(), 4], |i| table[tokens[i / 4]][i % 4])
}

const EMB_MAGIC: &[u8; 4] = b"PEMB";
const EMB_VERSION: u32 = 1;

/// Precomputed per-residue embeddings keyed by protein id.
///
/// Binary layout, all integers little-endian: `b"PEMB"`, `u32` version 1,
/// `u32` dim, `u32` record count; then per record `u32` id length, UTF-8
/// id bytes, `u32` residue count `L`, and `L·dim` `f64` values row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileEmbeddings {
    pub dim: usize,
    pub records: HashMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| data_err("embedding file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl FileEmbeddings {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != EMB_MAGIC {
            return Err(data_err("not an embedding file (bad magic)"));
        }
        let version = r.u32()?;
        if version != EMB_VERSION {
            return Err(data_err(format!("unsupported embedding file version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut records = HashMap::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(n)?)
                .map_err(|_| data_err("embedding id is not UTF-8"))?
                .to_string();
            let len = r.u32()? as usize;
            let raw = r.take(len * dim * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.insert(id, Tensor::new([len, dim], data)?);
        }
        if r.pos != bytes.len() {
            return Err(data_err("trailing bytes after embedding records"));
        }
        Ok(Self { dim, records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut ids: Vec<&String> = self.records.keys().collect();
        ids.sort();
        for id in ids {
            let t = &self.records[id];
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(t.shape()[0] as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Rows for parent residues `start .. start+len` (1-based, may run past
    /// either end); missing rows are zero.
    pub fn window(&self, id: &str, start: i64, len: usize) -> Result<Vec<f64>> {
        let t = self
            .records
            .get(id)
            .ok_or_else(|| Error::Data(format!("no precomputed embedding for {id}")))?;
        let rows = t.shape()[0] as i64;
        let mut out = vec![0.0; len * self.dim];
        for k in 0..len {
            let p = start + k as i64;
            if (1..=rows).contains(&p) {
                out[k * self.dim..(k + 1) * self.dim].copy_from_slice(t.row((p - 1) as usize));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_file_round_trip_and_errors() {
        let mut e = FileEmbeddings {
            dim: 2,
            records: HashMap::new(),
        };
        e.records.insert("p1".into(), Tensor::from_fn([3, 2], |i| i as f64));
        let bytes = e.to_bytes();
        assert_eq!(FileEmbeddings::from_bytes(&bytes).unwrap(), e);
        assert!(FileEmbeddings::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(FileEmbeddings::from_bytes(&bad).is_err());
        let w = e.window("p1", 0, 3).unwrap();
        assert_eq!(w, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sinusoid_first_row() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at2(1, 2) - 0.01f64.sin()).abs() < 1e-15);
    }
}
