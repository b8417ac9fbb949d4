//! Desk-scale synthetic experiments shared by the acceptance suite and the
//! command-line tool.

use std::time::{Duration, Instant};

use crate::crosstalk::{build_cooccurrence, npmi_matrix, CrosstalkMatrix};
use crate::data::synth::{generate_synthetic_corpus, CooccurrenceSpec, SynthSpec, SyntheticCorpus};
use crate::data::{
    build_pair_samples, cluster_split, segment_corpus, substrate_cold_split, warm_split, KmerJaccard, PairSample,
    PeptideSample, PtmAnnotation, Split,
};
use ptm_tensor::rng::{derive_seed, stream, Stream};
use rand::seq::SliceRandom;

use crate::error::Result;
use crate::metrics::auroc;
use crate::models::{
    cached_substrate_states, evaluate_sites, predict_cached, train_stage1, train_stage2, EspsModel, ExperimentConfig,
    MspnModel, PairInput, TrainOptions, TrainReport, SUBSTRATE_LEN,
};
use crate::residues::Eligibility;

/// Identity threshold used for homology-aware splits.
pub const SPLIT_IDENTITY: f64 = 0.4;
pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

/// A synthetic corpus cut into peptide windows and split by protein.
#[derive(Clone, Debug)]
pub struct Stage1Data {
    pub corpus: SyntheticCorpus,
    pub train: Vec<PeptideSample>,
    pub val: Vec<PeptideSample>,
    pub test: Vec<PeptideSample>,
    /// Annotations of training proteins only.
    pub train_annotations: Vec<PtmAnnotation>,
}

impl Stage1Data {
    pub fn num_peptides(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Co-occurrence prior estimated from training annotations.
    pub fn prior(&self) -> Result<CrosstalkMatrix> {
        let e = &self.corpus.eligibility;
        npmi_matrix(&build_cooccurrence(&self.train_annotations, e.num_types())?, e.names())
    }
}

/// Generates, segments and splits a corpus.
pub fn stage1_data(spec: &SynthSpec, seed: u64, max_len: usize) -> Result<Stage1Data> {
    let corpus = generate_synthetic_corpus(spec, seed)?;
    let split = cluster_split(
        &corpus.records,
        &KmerJaccard::default(),
        SPLIT_IDENTITY,
        SPLIT_RATIOS,
        seed,
    )?;
    let peptides = segment_corpus(&corpus.records, &corpus.annotations, &corpus.eligibility, max_len)?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for p in peptides {
        match split.get(&p.parent_id) {
            Some(Split::Train) => train.push(p),
            Some(Split::Valid) => val.push(p),
            _ => test.push(p),
        }
    }
    let train_annotations = corpus
        .annotations
        .iter()
        .filter(|a| split.get(&a.protein_id) == Some(Split::Train))
        .cloned()
        .collect();
    Ok(Stage1Data {
        corpus,
        train,
        val,
        test,
        train_annotations,
    })
}

/// The four-class planted-motif corpus sized to yield roughly 2 000 windows.
pub fn desk_stage1_spec() -> SynthSpec {
    SynthSpec::desk(2300, 30, 50)
}

/// Corpus where every acetylation site also carries ubiquitylation with
/// probability 0.8 and ubiquitylation has no motif of its own.
pub fn crosstalk_stage1_spec() -> SynthSpec {
    let mut spec = desk_stage1_spec();
    spec.types = vec![
        "phosphorylation".into(),
        "acetylation".into(),
        "ubiquitylation".into(),
        "n_linked_glycosylation".into(),
    ];
    spec.motifs.retain(|m| m.ptm_type != "methylation");
    spec.cooccurrence = vec![CooccurrenceSpec {
        a: "acetylation".into(),
        b: "ubiquitylation".into(),
        rate: 0.8,
    }];
    spec
}

/// Experiment config restricted to the classes of `eligibility`.
pub fn desk_config(eligibility: &Eligibility, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        types: eligibility.names(),
        ..ExperimentConfig::default()
    };
    c.train.seed = seed;
    c.stage2.seed = seed;
    c
}

/// Outcome of one Stage-1 training run.
#[derive(Clone, Debug)]
pub struct Stage1Run {
    pub model: MspnModel,
    pub report: TrainReport,
    pub best_val_f1: f64,
    pub test_f1: f64,
    pub elapsed: Duration,
}

/// Trains a fresh Stage-1 model on `data` and scores the held-out split.
pub fn run_stage1(config: &ExperimentConfig, data: &Stage1Data) -> Result<Stage1Run> {
    let t0 = Instant::now();
    let mut model = MspnModel::new(config, data.prior()?, None)?;
    let report = train_stage1(&mut model, &data.train, &data.val, &TrainOptions::default())?;
    let test_f1 = evaluate_sites(&model, &data.test, 0.5, config.train.batch_size)?.macro_f1;
    Ok(Stage1Run {
        best_val_f1: report.best_score.unwrap_or(0.0),
        test_f1,
        report,
        model,
        elapsed: t0.elapsed(),
    })
}

/// Residues around a curated site from which its negative mate is drawn.
pub const PAIR_CONTEXT: usize = 50;

/// Balanced enzyme–substrate pairs over every curated site of the corpus.
pub fn stage2_pairs(corpus: &SyntheticCorpus, seed: u64) -> Result<Vec<PairSample>> {
    build_pair_samples(
        &corpus.records,
        &corpus.enzymes,
        &corpus.enzyme_sites,
        &corpus.annotations,
        SUBSTRATE_LEN,
        PAIR_CONTEXT,
        seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSplit {
    Warm,
    SubstrateCold,
}

/// Partitions pairs into train / validation / test.
pub fn split_pairs(
    pairs: &[PairSample],
    kind: PairSplit,
    seed: u64,
) -> Result<(Vec<PairSample>, Vec<PairSample>, Vec<PairSample>)> {
    let labels = match kind {
        PairSplit::Warm => warm_split(pairs, SPLIT_RATIOS, seed)?,
        PairSplit::SubstrateCold => substrate_cold_split(pairs, SPLIT_RATIOS, seed)?,
    };
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (p, s) in pairs.iter().zip(labels) {
        match s {
            Split::Train => tr.push(p.clone()),
            Split::Valid => va.push(p.clone()),
            Split::Test => te.push(p.clone()),
        }
    }
    Ok((tr, va, te))
}

/// Copies of `pairs` with their labels permuted; the label balance is kept
/// and any link between a pair and its label is destroyed.
pub fn shuffled_labels(pairs: &[PairSample], seed: u64) -> Vec<PairSample> {
    let mut labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    labels.shuffle(&mut stream(derive_seed(seed, 1), Stream::Shuffle));
    pairs
        .iter()
        .zip(labels)
        .map(|(p, label)| PairSample { label, ..p.clone() })
        .collect()
}

/// Outcome of one Stage-2 training run.
#[derive(Clone, Debug)]
pub struct Stage2Run {
    pub model: EspsModel,
    pub report: TrainReport,
    pub best_val_auroc: f64,
    pub test_auroc: f64,
    pub elapsed: Duration,
}

/// Held-out AUROC of a pairing model.
pub fn pair_auroc(model: &EspsModel, pairs: &[PairSample]) -> Result<f64> {
    let inputs: Vec<PairInput> = pairs.iter().map(PairInput::from).collect();
    let states = cached_substrate_states(model, &inputs, 256)?;
    let enz: Vec<&str> = pairs.iter().map(|p| p.enzyme_sequence.as_str()).collect();
    let scores = predict_cached(model, &states, &enz, 256)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label == 1).collect();
    auroc(&scores, &labels)
}

/// Trains a pairing head on top of a frozen Stage-1 model.
pub fn run_stage2(
    stage1: &MspnModel,
    config: &ExperimentConfig,
    train: &[PairSample],
    val: &[PairSample],
    test: &[PairSample],
) -> Result<Stage2Run> {
    let t0 = Instant::now();
    let mut model = EspsModel::from_stage1(stage1, config)?;
    let report = train_stage2(&mut model, train, val, &TrainOptions::default())?;
    let test_auroc = pair_auroc(&model, test)?;
    Ok(Stage2Run {
        best_val_auroc: report.best_score.unwrap_or(0.0),
        test_auroc,
        report,
        model,
        elapsed: t0.elapsed(),
    })
}
