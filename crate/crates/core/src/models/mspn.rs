//! Stage-1 multi-label site profiler.

use std::sync::Arc;

use ptm_tensor::rng::{stream, Stream, StreamRng};
use ptm_tensor::{Graph, Mode, ParamId, ParamStore, Tensor, Var};

use super::config::{AblationFlags, ExperimentConfig, FusionVariant, ProteinProvider};
use super::provider::{physchem_features, FileEmbeddings, ToyEncoder};
use crate::blocks::{zero_padding, BatchLayout, BioCoupledFusion, Linear, PromptLayer, ResidualMlpHead};
use crate::crosstalk::CrosstalkMatrix;
use crate::data::PeptideSample;
use crate::error::{data_err, Error, Result};
use crate::losses::{training_loss, LossParams, LossVariant};
use crate::residues::{token, Eligibility, PAD_TOKEN, VOCAB};

/// A sequence to score, with its location in the parent protein for
/// providers that look embeddings up by coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub sequence: String,
    pub parent_id: String,
    /// 1-based parent position of the first letter (≤ 0 when padded).
    pub start: i64,
}

impl ModelInput {
    pub fn new(sequence: impl Into<String>) -> Self {
        Self {
            sequence: sequence.into(),
            parent_id: String::new(),
            start: 1,
        }
    }
}

impl From<&PeptideSample> for ModelInput {
    fn from(s: &PeptideSample) -> Self {
        Self {
            sequence: s.sequence.clone(),
            parent_id: s.parent_id.clone(),
            start: s.window_start as i64,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    BioCoupled(BioCoupledFusion),
    Concat(Linear),
    ProteinOnly,
}

#[derive(Clone, Debug)]
pub enum ProteinBranch {
    Toy(ToyEncoder),
    File(Arc<FileEmbeddings>),
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct MspnOutput {
    /// `[n·l × C]` pre-sigmoid scores.
    pub logits: Var,
    /// `[n·l × d]` last prompt-layer states.
    pub hidden: Var,
    pub layout: BatchLayout,
    /// `[n·l × d]` protein-branch input rows, present when requested.
    pub input_embedding: Option<Var>,
}

/// Parameter handles and wiring of the Stage-1 network.
#[derive(Clone, Debug)]
pub struct Mspn {
    pub flags: AblationFlags,
    pub num_types: usize,
    pub max_len: usize,
    pub d: usize,
    pub protein: ProteinBranch,
    pub chem_embedding: ParamId,
    pub fusion: Fusion,
    pub prompt_layers: Vec<PromptLayer>,
    pub share_prompt_bias: bool,
    pub predictor_from_head: bool,
    pub head: ResidualMlpHead,
    pub loss: LossParams,
    pub prior: CrosstalkMatrix,
}

/// Pads letters with `X` to the batch maximum.
pub fn encode_batch(inputs: &[ModelInput], max_len: usize) -> Result<(Vec<usize>, BatchLayout)> {
    if inputs.is_empty() {
        return Err(data_err("empty batch"));
    }
    let l = inputs.iter().map(|i| i.sequence.len()).max().unwrap_or(0);
    if l == 0 {
        return Err(data_err("empty sequence in batch"));
    }
    if l > max_len {
        return Err(data_err(format!(
            "sequence of length {l} exceeds the model limit {max_len}"
        )));
    }
    let mut tokens = Vec::with_capacity(inputs.len() * l);
    for inp in inputs {
        for b in inp.sequence.bytes() {
            tokens.push(token(b)?);
        }
        tokens.extend(std::iter::repeat_n(PAD_TOKEN, l - inp.sequence.len()));
    }
    let valid = tokens.iter().map(|&t| t != PAD_TOKEN).collect();
    Ok((
        tokens,
        BatchLayout {
            n: inputs.len(),
            l,
            valid,
        },
    ))
}

impl Mspn {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        config: &ExperimentConfig,
        prior: CrosstalkMatrix,
        file: Option<Arc<FileEmbeddings>>,
    ) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let c = config.types.len();
        if prior.num_types != c {
            return Err(Error::Config(format!(
                "crosstalk prior has {} types, config has {c}",
                prior.num_types
            )));
        }
        let d = m.d_model;
        let protein = match (&m.protein_provider, file) {
            (ProteinProvider::ToyEncoder, _) => ProteinBranch::Toy(ToyEncoder::new(
                store,
                rng,
                d,
                m.heads,
                m.encoder_layers,
                m.ff_hidden,
                &m.lora.to_lora(),
            )),
            (ProteinProvider::FileBacked { .. }, Some(f)) => {
                if f.dim != d {
                    return Err(Error::Config(format!(
                        "embedding file dim {} differs from d_model {d}",
                        f.dim
                    )));
                }
                ProteinBranch::File(f)
            }
            (ProteinProvider::FileBacked { path }, None) => {
                return Err(Error::Config(format!("embedding file {path} was not loaded")))
            }
        };
        let chem_table = crate::blocks::uniform_init(rng, [VOCAB, m.chem_embed_dim], 1);
        let chem_embedding = store.add("chem.embedding", chem_table, true);
        let d_a = 4 + m.chem_embed_dim;
        let fusion = match config.ablation.fusion_variant {
            FusionVariant::BioCoupled => Fusion::BioCoupled(BioCoupledFusion::new(store, rng, "fusion", d, d_a)),
            FusionVariant::Concat => Fusion::Concat(Linear::new(store, rng, "fusion.concat", d + d_a, d, true, true)),
            FusionVariant::ProteinOnly => Fusion::ProteinOnly,
        };
        let prompt_layers = (0..m.prompt_layers)
            .map(|i| {
                PromptLayer::new(
                    store,
                    rng,
                    &format!("prompt{i}"),
                    d,
                    m.heads,
                    m.ff_hidden,
                    c,
                    m.prompt_alpha,
                    m.prompt_dropout,
                )
            })
            .collect();
        let head = ResidualMlpHead::new(store, rng, "head", d, m.head_hidden, c);
        let loss = LossParams::init(store, "loss");
        let net = Self {
            flags: config.ablation.clone(),
            num_types: c,
            max_len: m.max_len,
            d,
            protein,
            chem_embedding,
            fusion,
            prompt_layers,
            share_prompt_bias: m.share_prompt_bias,
            predictor_from_head: m.predictor_from_head,
            head,
            loss,
            prior,
        };
        net.apply_trainability(store);
        Ok(net)
    }

    /// Freezes parameters that the current flags leave unused.
    pub fn apply_trainability(&self, store: &mut ParamStore) {
        if let ProteinBranch::Toy(enc) = &self.protein {
            for id in enc.adapter_params() {
                store.set_trainable(id, self.flags.lora_enabled);
            }
        }
        for layer in &self.prompt_layers {
            let on = self.flags.prompt_enabled;
            let predictor_on = on && !self.predictor_from_head;
            for id in [layer.prompt.proj_a, layer.prompt.proj_b, layer.prompt.alpha] {
                store.set_trainable(id, on);
            }
            for id in layer.predictor.params() {
                store.set_trainable(id, predictor_on);
            }
        }
        let hybrid = self.flags.loss_variant == LossVariant::Hybrid;
        store.set_trainable(self.loss.eta_raw, hybrid);
        store.set_trainable(self.loss.omega_raw, hybrid);
    }

    /// Every adapter parameter of the protein encoder.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        match &self.protein {
            ProteinBranch::Toy(enc) => enc.adapter_params(),
            ProteinBranch::File(_) => vec![],
        }
    }

    pub fn forward(&self, g: &mut Graph, inputs: &[ModelInput], with_input_embedding: bool) -> Result<MspnOutput> {
        let (tokens, layout) = encode_batch(inputs, self.max_len)?;
        let (xp, input_embedding) = match &self.protein {
            ProteinBranch::Toy(enc) => {
                let mut rows = enc.embed_tokens(g, &tokens)?;
                if with_input_embedding {
                    let t = g.value(rows).clone();
                    rows = g.tape.leaf(t, true);
                }
                let h = enc.encode(g, rows, &layout, self.flags.lora_enabled)?;
                (h, with_input_embedding.then_some(rows))
            }
            ProteinBranch::File(f) => {
                let mut data = Vec::with_capacity(tokens.len() * self.d);
                for inp in inputs {
                    let mut w = f.window(&inp.parent_id, inp.start, layout.l)?;
                    for (k, b) in inp
                        .sequence
                        .bytes()
                        .chain(std::iter::repeat(b'X'))
                        .take(layout.l)
                        .enumerate()
                    {
                        if b == b'X' {
                            w[k * self.d..(k + 1) * self.d].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    data.extend(w);
                }
                let t = Tensor::new([tokens.len(), self.d], data)?;
                let v = if with_input_embedding {
                    g.tape.leaf(t, true)
                } else {
                    g.input(t)
                };
                (v, with_input_embedding.then_some(v))
            }
        };
        let phys = g.input(physchem_features(&tokens));
        let table = g.param(self.chem_embedding);
        let learned = g.tape.gather_rows(table, &tokens)?;
        let xa = g.tape.concat_last(phys, learned)?;
        let xa = zero_padding(g, xa, &layout)?;
        let fused = match &self.fusion {
            Fusion::BioCoupled(f) => f.forward(g, xp, xa)?,
            Fusion::Concat(lin) => {
                let cat = g.tape.concat_last(xp, xa)?;
                lin.forward(g, cat)?
            }
            Fusion::ProteinOnly => xp,
        };
        let mut h = zero_padding(g, fused, &layout)?;
        let prior = g.input(self.prior.to_tensor());
        let mut shared: Option<Var> = None;
        for (i, layer) in self.prompt_layers.iter().enumerate() {
            let bias = if !self.flags.prompt_enabled {
                None
            } else if let (true, Some(b)) = (self.share_prompt_bias, shared) {
                Some(b)
            } else {
                let p = if self.predictor_from_head {
                    let z = self.head.forward(g, h)?;
                    g.tape.softmax_lastdim(z)?
                } else {
                    layer.preliminary(g, h)?
                };
                let b = layer.bias_from(g, p, prior, &layout)?;
                if i == 0 {
                    shared = Some(b);
                }
                Some(b)
            };
            h = layer.forward(g, h, &layout, bias)?;
        }
        let logits = self.head.forward(g, h)?;
        Ok(MspnOutput {
            logits,
            hidden: h,
            layout,
            input_embedding,
        })
    }

    /// Training objective over every non-pad residue eligible for at least
    /// one class.
    pub fn loss(&self, g: &mut Graph, samples: &[PeptideSample]) -> Result<Var> {
        let inputs: Vec<ModelInput> = samples.iter().map(ModelInput::from).collect();
        let out = self.forward(g, &inputs, false)?;
        let l = out.layout.l;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, s) in samples.iter().enumerate() {
            for i in 0..s.sequence.len() {
                if s.site_mask[i] {
                    rows.push(b * l + i);
                    labels.extend(s.labels[i].iter().map(|&v| f64::from(v)));
                }
            }
        }
        if rows.is_empty() {
            return Err(data_err("batch has no eligible residues"));
        }
        let logits = g.tape.gather_rows(out.logits, &rows)?;
        let labels = Tensor::new([rows.len(), self.num_types], labels)?;
        training_loss(g, self.flags.loss_variant, logits, &labels, &self.loss)
    }
}

/// A Stage-1 network together with its parameters.
#[derive(Clone, Debug)]
pub struct MspnModel {
    pub config: ExperimentConfig,
    pub eligibility: Eligibility,
    pub net: Mspn,
    pub store: ParamStore,
}

impl MspnModel {
    /// Fresh parameters drawn from the init stream of `config.train.seed`.
    pub fn new(config: &ExperimentConfig, prior: CrosstalkMatrix, file: Option<Arc<FileEmbeddings>>) -> Result<Self> {
        let names: Vec<&str> = config.types.iter().map(String::as_str).collect();
        let eligibility = Eligibility::select(&names)?;
        let mut store = ParamStore::new();
        let mut rng = stream(config.train.seed, Stream::Init);
        let net = Mspn::build(&mut store, &mut rng, config, prior, file)?;
        Ok(Self {
            config: config.clone(),
            eligibility,
            net,
            store,
        })
    }

    /// Per-residue probabilities `[len × C]` for each input, in eval mode.
    pub fn predict(&self, inputs: &[ModelInput], batch_size: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            let mut g = Graph::new(&self.store, Mode::Eval, 0);
            let o = self.net.forward(&mut g, chunk, false)?;
            let probs = g.tape.sigmoid(o.logits)?;
            let p = g.value(probs);
            let c = self.net.num_types;
            for (b, inp) in chunk.iter().enumerate() {
                let start = b * o.layout.l * c;
                let len = inp.sequence.len();
                out.push(Tensor::new([len, c], p.data()[start..start + len * c].to_vec())?);
            }
        }
        Ok(out)
    }

    /// Last prompt-layer states `[len × d]` for each input, in eval mode.
    pub fn hidden_states(&self, inputs: &[ModelInput], batch_size: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            let mut g = Graph::new(&self.store, Mode::Eval, 0);
            let o = self.net.forward(&mut g, chunk, false)?;
            let h = g.value(o.hidden);
            let d = self.net.d;
            for (b, inp) in chunk.iter().enumerate() {
                let start = b * o.layout.l * d;
                let len = inp.sequence.len();
                out.push(Tensor::new([len, d], h.data()[start..start + len * d].to_vec())?);
            }
        }
        Ok(out)
    }
}
