use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ptm", version, about = "PTM site profiling and enzyme-substrate pairing")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Seed for every stochastic step; falls back to COMPASS_SEED, then the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override such as `train.lr=0.01`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Only print results and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Print results as one JSON object.
    #[arg(long, global = true)]
    pub json: bool,
    /// Where to write the run manifest; defaults to next to the first output.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Co-occurrence priors.
    #[command(subcommand)]
    Crosstalk(CrosstalkCommand),
    /// Model training.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Score proteins with a site model or pairs with a pairing model.
    Predict(PredictArgs),
    /// Metrics over prediction files.
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
    /// Probability change at a site caused by point mutations.
    VariantEffect(VariantArgs),
    /// Per-residue gradient-times-input attribution for one prediction.
    Attribute(AttributeArgs),
    /// Position frequency matrix of top-scoring substrate windows.
    MotifLogo(MotifLogoArgs),
    /// Finite-difference check of every operation, block and model graph.
    Gradcheck(GradcheckArgs),
    /// Write per-residue hidden states in the precomputed-embedding format.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Cut annotated proteins into labelled peptide windows (JSON lines).
    Segment(SegmentArgs),
    /// Similarity-aware train/valid/test assignment of proteins.
    Split(SplitArgs),
    /// Centred windows around annotated sites, or enzyme-substrate pairs.
    Windows(WindowsArgs),
    /// Generate a planted-motif synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Window length limit; defaults to `model.max_len`.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub threshold: f64,
    /// Comma-separated train,valid,test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub ratios: String,
}

#[derive(Debug, Args)]
pub struct WindowsArgs {
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub len: usize,
    /// Enzyme FASTA; together with `--enzyme-sites` emits balanced pairs.
    #[arg(long, requires = "enzyme_sites")]
    pub enzymes: Option<PathBuf>,
    #[arg(long, requires = "enzymes")]
    pub enzyme_sites: Option<PathBuf>,
    /// Residues around a curated site searched for its negative mate.
    #[arg(long, default_value_t = 50)]
    pub context: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Four classes with planted motifs.
    Desk,
    /// Desk corpus with acetylation sites co-carrying ubiquitylation.
    Crosstalk,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// JSON corpus description replacing the preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub proteins: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum CrosstalkCommand {
    /// nPMI matrix from annotation co-occurrence.
    Build(CrosstalkArgs),
}

#[derive(Debug, Args)]
pub struct CrosstalkArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Restrict counting to proteins assigned to the training split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Train the multi-label site profiler.
    Stage1(Stage1Args),
    /// Train the pairing head on a frozen site profiler.
    Stage2(Stage2Args),
}

#[derive(Debug, Args)]
pub struct Stage1Args {
    /// Peptide windows from `data segment`.
    #[arg(long)]
    pub peptides: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Prior from `crosstalk build`.
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Metric history (JSON lines); defaults to `<out>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PairSplitKind {
    Warm,
    SubstrateCold,
    EnzymeCold,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    #[arg(long)]
    pub stage1: PathBuf,
    /// Pairs from `data windows --enzymes`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub enzymes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "warm")]
    pub split_kind: PairSplitKind,
    /// Permute training and validation labels (null-model control).
    #[arg(long)]
    pub shuffle_labels: bool,
    /// Proceed when `--config` differs from the checkpoint's config.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Proteins to scan with a site model.
    #[arg(long, required_unless_present = "pairs")]
    pub fasta: Option<PathBuf>,
    /// Pairs to score with a pairing model.
    #[arg(long, requires = "enzymes")]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub enzymes: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvaluateCommand {
    /// Per-class and macro F1/MCC of thresholded site scores.
    Site(EvalSiteArgs),
    /// AUROC and AUPRC of scored pairs.
    Pair(EvalPairArgs),
    /// Mean average precision over ranked candidate lists.
    Map(EvalMapArgs),
}

#[derive(Debug, Args)]
pub struct EvalSiteArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvalPairArgs {
    /// Scored pairs from `predict --pairs`.
    #[arg(long)]
    pub pred: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    #[arg(long)]
    pub rankings: PathBuf,
}

#[derive(Debug, Args)]
pub struct VariantArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub protein: String,
    /// Point mutation such as `R12A`; may be repeated.
    #[arg(long = "variant", required = true)]
    pub variants: Vec<String>,
    /// 1-based site whose probability is reported.
    #[arg(long)]
    pub site: usize,
    #[arg(long = "type")]
    pub ptm_type: String,
    /// Window length; defaults to `model.max_len`.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub peptide: String,
    /// 1-based position inside the peptide.
    #[arg(long)]
    pub position: usize,
    #[arg(long = "type")]
    pub ptm_type: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MotifLogoArgs {
    /// Scored pairs from `predict --pairs`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Enzyme id whose substrates are pooled.
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check operations, blocks, losses and both model graphs.
    #[arg(long)]
    pub all: bool,
    /// Limit to one group (`op`, `block`, `loss` or `model`).
    #[arg(long, conflicts_with = "all")]
    pub group: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
