//! Stage-2 enzyme–substrate pairing on top of a frozen Stage-1 network.

use ptm_tensor::rng::{stream, Stream};
use ptm_tensor::{Graph, Mode, ParamId, ParamStore, Tensor, Var};

use super::config::{ExperimentConfig, SubstrateEmbedding};
use super::mspn::{ModelInput, Mspn, MspnModel};
use crate::blocks::{uniform_init, DualGatedFusion, Linear};
use crate::data::PairSample;
use crate::error::{data_err, Result};
use crate::residues::{token, PAD_TOKEN, VOCAB};

/// Substrate window length expected by the pairing head.
pub const SUBSTRATE_LEN: usize = 15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairInput {
    pub substrate: ModelInput,
    /// 0-based index of the candidate residue inside the window.
    pub center: usize,
    pub enzyme_sequence: String,
}

impl From<&PairSample> for PairInput {
    fn from(p: &PairSample) -> Self {
        let half = (SUBSTRATE_LEN / 2) as i64;
        Self {
            substrate: ModelInput {
                sequence: p.substrate_peptide.clone(),
                parent_id: p.substrate_id.clone(),
                start: p.center_position as i64 - half,
            },
            center: SUBSTRATE_LEN / 2,
            enzyme_sequence: p.enzyme_sequence.clone(),
        }
    }
}

/// Stage-2 parameters: enzyme token table, dual-gated fusion, binary head.
#[derive(Clone, Debug)]
pub struct Esps {
    pub enzyme_embedding: ParamId,
    pub fusion: DualGatedFusion,
    pub head: Linear,
    pub enzyme_max_len: usize,
    pub substrate_embedding: SubstrateEmbedding,
    pub d: usize,
}

/// Residue composition `[n × 21]` over at most `max_len` leading letters,
/// with `X` excluded.
pub fn enzyme_composition(enzymes: &[&str], max_len: usize) -> Result<Tensor> {
    let mut data = vec![0.0; enzymes.len() * VOCAB];
    for (i, e) in enzymes.iter().enumerate() {
        let mut count = 0usize;
        for b in e.bytes().take(max_len) {
            let t = token(b)?;
            if t != PAD_TOKEN {
                data[i * VOCAB + t] += 1.0;
                count += 1;
            }
        }
        if count == 0 {
            return Err(data_err("enzyme sequence has no residues"));
        }
        data[i * VOCAB..(i + 1) * VOCAB]
            .iter_mut()
            .for_each(|v| *v /= count as f64);
    }
    Ok(Tensor::new([enzymes.len(), VOCAB], data)?)
}

impl Esps {
    pub fn build(store: &mut ParamStore, config: &ExperimentConfig, d: usize) -> Self {
        let mut rng = stream(config.stage2.seed, Stream::Sub(1, 2));
        let table = uniform_init(&mut rng, [VOCAB, d], 1);
        Self {
            enzyme_embedding: store.add("esps.enzyme_embedding", table, true),
            fusion: DualGatedFusion::new(store, &mut rng, "esps.fusion", d),
            head: Linear::new(store, &mut rng, "esps.head", d, 1, true, true),
            enzyme_max_len: config.model.enzyme_max_len,
            substrate_embedding: config.model.substrate_embedding,
            d,
        }
    }

    /// Mean-pooled enzyme token embeddings `[n × d]`.
    pub fn enzyme_repr(&self, g: &mut Graph, enzymes: &[&str]) -> Result<Var> {
        let comp = g.input(enzyme_composition(enzymes, self.enzyme_max_len)?);
        let table = g.param(self.enzyme_embedding);
        Ok(g.tape.matmul(comp, table)?)
    }

    /// Pair logits `[n × 1]` from substrate states `[n × d]`.
    pub fn logits(&self, g: &mut Graph, h_sub: Var, enzymes: &[&str]) -> Result<Var> {
        let h_enz = self.enzyme_repr(g, enzymes)?;
        let fused = self.fusion.forward(g, h_sub, h_enz)?;
        self.head.forward(g, fused)
    }

    /// Frozen Stage-1 substrate states `[n × d]` in eval mode.
    pub fn substrate_states(&self, stage1: &Mspn, store: &ParamStore, pairs: &[PairInput]) -> Result<Tensor> {
        for p in pairs {
            if p.substrate.sequence.len() != SUBSTRATE_LEN || p.center >= SUBSTRATE_LEN {
                return Err(data_err(format!(
                    "substrate window must have {SUBSTRATE_LEN} letters, got {:?}",
                    p.substrate.sequence
                )));
            }
        }
        let inputs: Vec<ModelInput> = pairs.iter().map(|p| p.substrate.clone()).collect();
        let mut g = Graph::new(store, Mode::Eval, 0);
        let out = stage1.forward(&mut g, &inputs, false)?;
        let h = g.value(out.hidden);
        let (l, d) = (out.layout.l, self.d);
        let mut data = Vec::with_capacity(pairs.len() * d);
        for (b, p) in pairs.iter().enumerate() {
            match self.substrate_embedding {
                SubstrateEmbedding::Center => {
                    let r = b * l + p.center;
                    data.extend_from_slice(&h.data()[r * d..(r + 1) * d]);
                }
                SubstrateEmbedding::Pooled => {
                    let rows: Vec<usize> = (0..l).filter(|&i| out.layout.valid[b * l + i]).collect();
                    let mut acc = vec![0.0; d];
                    for &i in &rows {
                        let r = b * l + i;
                        for (a, v) in acc.iter_mut().zip(&h.data()[r * d..(r + 1) * d]) {
                            *a += v;
                        }
                    }
                    let k = rows.len().max(1) as f64;
                    data.extend(acc.into_iter().map(|v| v / k));
                }
            }
        }
        Ok(Tensor::new([pairs.len(), d], data)?)
    }
}

/// Stage-1 wiring, Stage-2 wiring and one parameter store holding both;
/// every Stage-1 entry is frozen.
#[derive(Clone, Debug)]
pub struct EspsModel {
    pub config: ExperimentConfig,
    pub stage1: Mspn,
    pub net: Esps,
    pub store: ParamStore,
}

impl EspsModel {
    pub fn from_stage1(stage1: &MspnModel, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut store = stage1.store.clone();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        let net = Esps::build(&mut store, config, stage1.net.d);
        Ok(Self {
            config: config.clone(),
            stage1: stage1.net.clone(),
            net,
            store,
        })
    }

    /// Ids of every parameter owned by the Stage-1 network.
    pub fn stage1_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with("esps."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn substrate_states(&self, pairs: &[PairInput]) -> Result<Tensor> {
        self.net.substrate_states(&self.stage1, &self.store, pairs)
    }

    /// Logits `[n × 1]` given precomputed substrate states.
    pub fn forward_cached(&self, g: &mut Graph, h_sub: &Tensor, enzymes: &[&str]) -> Result<Var> {
        let h = g.input(h_sub.clone());
        self.net.logits(g, h, enzymes)
    }

    pub fn forward(&self, g: &mut Graph, pairs: &[PairInput]) -> Result<Var> {
        let h = self.substrate_states(pairs)?;
        let enzymes: Vec<&str> = pairs.iter().map(|p| p.enzyme_sequence.as_str()).collect();
        self.forward_cached(g, &h, &enzymes)
    }

    /// Pairing probabilities in eval mode.
    pub fn predict(&self, pairs: &[PairInput], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(batch_size.max(1)) {
            let mut g = Graph::new(&self.store, Mode::Eval, 0);
            let z = self.forward(&mut g, chunk)?;
            let p = g.tape.sigmoid(z)?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }
}
