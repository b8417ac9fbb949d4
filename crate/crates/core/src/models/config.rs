use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::blocks::LoraConfig;
use crate::error::{Error, Result};
use crate::losses::LossVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProteinProvider {
    /// Learned token embedding, sinusoidal positions and a small frozen
    /// transformer with adapters on q/k/v.
    ToyEncoder,
    /// Per-residue embeddings precomputed elsewhere and stored on disk.
    FileBacked { path: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    BioCoupled,
    /// A single linear map of the concatenated branches.
    Concat,
    /// The chemical branch is ignored.
    ProteinOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstrateEmbedding {
    /// Last prompt-layer state at the centre residue.
    Center,
    /// Mean of the last prompt-layer states over non-pad residues.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl LoraSettings {
    pub fn to_lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_hidden: usize,
    pub chem_embed_dim: usize,
    pub prompt_layers: usize,
    pub head_hidden: usize,
    pub max_len: usize,
    pub protein_provider: ProteinProvider,
    pub lora: LoraSettings,
    pub prompt_alpha: f64,
    pub prompt_dropout: f64,
    /// Reuse the first prompt layer's bias in later layers.
    pub share_prompt_bias: bool,
    /// Derive preliminary distributions from the final head instead of a
    /// dedicated per-layer predictor.
    pub predictor_from_head: bool,
    pub substrate_embedding: SubstrateEmbedding,
    pub enzyme_max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            encoder_layers: 2,
            ff_hidden: 128,
            chem_embed_dim: 8,
            prompt_layers: 2,
            head_hidden: 32,
            max_len: 50,
            protein_provider: ProteinProvider::ToyEncoder,
            lora: LoraSettings::default(),
            prompt_alpha: 0.1,
            prompt_dropout: 0.1,
            share_prompt_bias: false,
            predictor_from_head: false,
            substrate_embedding: SubstrateEmbedding::Center,
            enzyme_max_len: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub prompt_enabled: bool,
    pub lora_enabled: bool,
    pub loss_variant: LossVariant,
    pub fusion_variant: FusionVariant,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            prompt_enabled: true,
            lora_enabled: true,
            loss_variant: LossVariant::Hybrid,
            fusion_variant: FusionVariant::BioCoupled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale optimizer settings: learning rate 2e-5, batch 256, 100 epochs.
    pub fn full_scale() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 256,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// Everything needed to rebuild and train both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Ordered PTM class names from the eligibility table.
    pub types: Vec<String>,
    pub model: ModelConfig,
    pub ablation: AblationFlags,
    pub train: TrainConfig,
    pub stage2: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            types: crate::residues::Eligibility::bundled().names(),
            model: ModelConfig::default(),
            ablation: AblationFlags::default(),
            train: TrainConfig::default(),
            stage2: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides on top of this config. Dotted keys
    /// address nested fields; values parse as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut v, key.trim(), raw.trim())?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let v = serde_json::to_value(self)?;
        let bytes = serde_json::to_vec(&v)?;
        Ok(Sha256::digest(&bytes).into())
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(hex::encode(self.hash()?))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if self.types.is_empty() {
            return Err(Error::Config("at least one PTM type is required".into()));
        }
        if m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                m.d_model, m.heads
            )));
        }
        if m.lora.rank == 0 || m.max_len == 0 || m.enzyme_max_len == 0 {
            return Err(Error::Config("lora rank and length limits must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.prompt_dropout) || !(0.0..1.0).contains(&m.lora.dropout) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        self.train.validate()?;
        self.stage2.validate()
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
    }
    Err(Error::Config("empty override key".into()))
}
