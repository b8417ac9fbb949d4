//! Stage-1 site profiler, Stage-2 pair scorer, checkpoints and training.

mod checkpoint;
mod config;
mod esps;
mod mspn;
mod provider;
mod train;

pub use checkpoint::{Checkpoint, CheckpointEntry, MAGIC, VERSION};
pub use config::{
    AblationFlags, ExperimentConfig, FusionVariant, LoraSettings, ModelConfig, ProteinProvider, SubstrateEmbedding,
    TrainConfig,
};
pub use esps::{enzyme_composition, Esps, EspsModel, PairInput, SUBSTRATE_LEN};
pub use mspn::{encode_batch, Fusion, ModelInput, Mspn, MspnModel, MspnOutput, ProteinBranch};
pub use provider::{physchem_features, sinusoidal_positions, FileEmbeddings, ToyEncoder};
pub use train::{
    cached_substrate_states, evaluate_sites, predict_cached, summarize_counts, train_stage1, train_stage2, EpochRecord,
    SiteEvaluation, TrainOptions, TrainReport,
};
