use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ptm_core::crosstalk::{build_cooccurrence, npmi_matrix, CrosstalkMatrix};
use ptm_core::data::synth::{generate_synthetic_corpus, SynthSpec};
use ptm_core::data::tsv::{
    parse_ptm_type, read_annotations, read_enzyme_sites, read_pairs, read_predictions, read_rankings, read_site_labels,
    write_annotations, write_enzyme_sites, write_pairs, write_predictions, SitePrediction,
};
use ptm_core::data::{
    build_pair_samples, cluster_split, enzyme_cold_split, parse_fasta, segment_corpus, substrate_cold_split,
    warm_split, window_peptide, write_fasta, KmerJaccard, PairSample, PeptideSample, ProteinRecord, Split,
    SplitAssignment,
};
use ptm_core::experiments::{crosstalk_stage1_spec, desk_stage1_spec, shuffled_labels, SPLIT_RATIOS};
use ptm_core::gradsuite;
use ptm_core::metrics::{
    auprc, auroc, confusion_metrics, group_rankings, input_gradient_attribution, mean_average_precision, motif_logo,
    variant_delta, BinaryCounts, Mutation, ScoredPeptide, VariantEffect,
};
use ptm_core::models::{
    evaluate_sites, summarize_counts, train_stage1, train_stage2, Checkpoint, EspsModel, ExperimentConfig,
    FileEmbeddings, ModelInput, MspnModel, PairInput, ProteinProvider, TrainOptions,
};
use ptm_core::residues::Eligibility;
use serde_json::{json, Value};

use crate::args::*;
use crate::context::RunContext;
use crate::error::{CliError, Result};

/// Human-readable lines plus the same result as JSON.
pub struct Output {
    pub lines: Vec<String>,
    pub json: Value,
}

impl Output {
    fn new(lines: Vec<String>, json: Value) -> Self {
        Self { lines, json }
    }
}

const PREDICT_BATCH: usize = 64;

pub fn run(ctx: &mut RunContext, command: &Command) -> Result<Output> {
    match command {
        Command::Data(DataCommand::Segment(a)) => segment(ctx, a),
        Command::Data(DataCommand::Split(a)) => split(ctx, a),
        Command::Data(DataCommand::Windows(a)) => windows(ctx, a),
        Command::Data(DataCommand::Synth(a)) => synth(ctx, a),
        Command::Crosstalk(CrosstalkCommand::Build(a)) => crosstalk(ctx, a),
        Command::Train(TrainCommand::Stage1(a)) => stage1(ctx, a),
        Command::Train(TrainCommand::Stage2(a)) => stage2(ctx, a),
        Command::Predict(a) => predict(ctx, a),
        Command::Evaluate(EvaluateCommand::Site(a)) => evaluate_site(ctx, a),
        Command::Evaluate(EvaluateCommand::Pair(a)) => evaluate_pair(ctx, a),
        Command::Evaluate(EvaluateCommand::Map(a)) => evaluate_map(ctx, a),
        Command::VariantEffect(a) => variant_effect(ctx, a),
        Command::Attribute(a) => attribute(ctx, a),
        Command::MotifLogo(a) => logo(ctx, a),
        Command::Gradcheck(a) => gradcheck(ctx, a),
        Command::ExportEmbeddings(a) => export_embeddings(ctx, a),
    }
}

fn eligibility(config: &ExperimentConfig) -> Result<Eligibility> {
    let names: Vec<&str> = config.types.iter().map(String::as_str).collect();
    Ok(Eligibility::select(&names)?)
}

fn read_fasta(ctx: &mut RunContext, path: &Path) -> Result<Vec<ProteinRecord>> {
    Ok(parse_fasta(&ctx.read_text(path)?)?)
}

fn embeddings(ctx: &mut RunContext, config: &ExperimentConfig) -> Result<Option<Arc<FileEmbeddings>>> {
    match &config.model.protein_provider {
        ProteinProvider::FileBacked { path } => {
            let bytes = ctx.read_bytes(Path::new(path))?;
            Ok(Some(Arc::new(FileEmbeddings::from_bytes(&bytes)?)))
        }
        ProteinProvider::ToyEncoder => Ok(None),
    }
}

fn read_checkpoint(ctx: &mut RunContext, path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_bytes(&ctx.read_bytes(path)?)?)
}

/// Loads the site model of a Stage-1 or Stage-2 checkpoint.
fn load_site_model(ctx: &mut RunContext, path: &Path) -> Result<MspnModel> {
    let ck = read_checkpoint(ctx, path)?;
    let config = ck.config()?;
    ctx.config(Some(config.clone()))?;
    let file = embeddings(ctx, &config)?;
    Ok(MspnModel::from_checkpoint(&ck, file)?)
}

fn enzyme_lookup(records: Vec<ProteinRecord>) -> impl Fn(&str) -> Option<String> {
    let map: HashMap<String, String> = records.into_iter().map(|r| (r.id, r.sequence)).collect();
    move |id| map.get(id).cloned()
}

fn segment(ctx: &mut RunContext, a: &SegmentArgs) -> Result<Output> {
    let config = ctx.config(None)?;
    let elig = eligibility(&config)?;
    let records = read_fasta(ctx, &a.fasta)?;
    let anns = read_annotations(&ctx.read_text(&a.annotations)?, &elig)?;
    let max_len = a.max_len.unwrap_or(config.model.max_len);
    let peptides = segment_corpus(&records, &anns, &elig, max_len)?;
    let mut out = String::new();
    for p in &peptides {
        out.push_str(&serde_json::to_string(p).map_err(|e| CliError::Data(e.to_string()))?);
        out.push('\n');
    }
    ctx.write(&a.out, out)?;
    Ok(Output::new(
        vec![format!("{} peptides from {} proteins", peptides.len(), records.len())],
        json!({"peptides": peptides.len(), "proteins": records.len()}),
    ))
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--ratios {s:?} must be three comma-separated numbers")))?;
    v.try_into()
        .map_err(|_| CliError::Usage(format!("--ratios {s:?} must have three entries")))
}

fn split(ctx: &mut RunContext, a: &SplitArgs) -> Result<Output> {
    let seed = ctx.seed()?;
    let ratios = parse_ratios(&a.ratios)?;
    let records = read_fasta(ctx, &a.fasta)?;
    let assignment = cluster_split(&records, &KmerJaccard::default(), a.threshold, ratios, seed)?;
    ctx.write(&a.out, assignment.to_tsv())?;
    let counts = [Split::Train, Split::Valid, Split::Test].map(|s| assignment.count(s));
    Ok(Output::new(
        vec![format!("train {} valid {} test {}", counts[0], counts[1], counts[2])],
        json!({"train": counts[0], "valid": counts[1], "test": counts[2]}),
    ))
}

fn windows(ctx: &mut RunContext, a: &WindowsArgs) -> Result<Output> {
    let config = ctx.config(None)?;
    let seed = config.train.seed;
    let elig = eligibility(&config)?;
    let records = read_fasta(ctx, &a.fasta)?;
    let anns = read_annotations(&ctx.read_text(&a.annotations)?, &elig)?;
    if let (Some(ep), Some(sp)) = (&a.enzymes, &a.enzyme_sites) {
        let enzymes = read_fasta(ctx, ep)?;
        let sites = read_enzyme_sites(&ctx.read_text(sp)?, &elig)?;
        let pairs = build_pair_samples(&records, &enzymes, &sites, &anns, a.len, a.context, seed)?;
        ctx.write(&a.out, write_pairs(&pairs))?;
        let pos = pairs.iter().filter(|p| p.label == 1).count();
        return Ok(Output::new(
            vec![format!("{} pairs ({pos} positive)", pairs.len())],
            json!({"pairs": pairs.len(), "positive": pos}),
        ));
    }
    let by_id: HashMap<&str, &ProteinRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = String::from("protein_id\tposition\tptm_type\tpeptide\n");
    for ann in &anns {
        let rec = by_id
            .get(ann.protein_id.as_str())
            .ok_or_else(|| CliError::Data(format!("annotation for unknown protein {}", ann.protein_id)))?;
        let w = window_peptide(&rec.sequence, ann.position, a.len)?;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{w}",
            ann.protein_id, ann.position, elig.types[ann.ptm_type].name
        );
    }
    ctx.write(&a.out, out)?;
    Ok(Output::new(
        vec![format!("{} windows", anns.len())],
        json!({"windows": anns.len()}),
    ))
}

fn synth(ctx: &mut RunContext, a: &SynthArgs) -> Result<Output> {
    let seed = ctx.seed()?;
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_str(&ctx.read_text(p)?).map_err(|e| CliError::Data(e.to_string()))?,
        None => match a.preset {
            Preset::Desk => desk_stage1_spec(),
            Preset::Crosstalk => crosstalk_stage1_spec(),
        },
    };
    if let Some(n) = a.proteins {
        spec.num_proteins = n;
    }
    let corpus = generate_synthetic_corpus(&spec, seed)?;
    let e = &corpus.eligibility;
    let dir = &a.out_dir;
    ctx.write(&dir.join("proteins.fasta"), write_fasta(&corpus.records))?;
    ctx.write(
        &dir.join("annotations.tsv"),
        write_annotations(&corpus.annotations, e, "synthetic"),
    )?;
    ctx.write(&dir.join("enzymes.fasta"), write_fasta(&corpus.enzymes))?;
    ctx.write(
        &dir.join("enzyme_sites.tsv"),
        write_enzyme_sites(&corpus.enzyme_sites, e),
    )?;
    let config = ExperimentConfig {
        types: e.names(),
        ..ctx.config(None)?
    };
    ctx.write(&dir.join("config.json"), config.to_json()?)?;
    Ok(Output::new(
        vec![format!(
            "{} proteins, {} sites, {} enzymes",
            corpus.records.len(),
            corpus.annotations.len(),
            corpus.enzymes.len()
        )],
        json!({
            "proteins": corpus.records.len(),
            "annotations": corpus.annotations.len(),
            "enzymes": corpus.enzymes.len(),
        }),
    ))
}

fn read_split(ctx: &mut RunContext, path: &Path) -> Result<SplitAssignment> {
    Ok(SplitAssignment::from_tsv(&ctx.read_text(path)?)?)
}

fn crosstalk(ctx: &mut RunContext, a: &CrosstalkArgs) -> Result<Output> {
    let config = ctx.config(None)?;
    let elig = eligibility(&config)?;
    let mut anns = read_annotations(&ctx.read_text(&a.annotations)?, &elig)?;
    if let Some(p) = &a.split {
        let split = read_split(ctx, p)?;
        let map = split.as_map();
        anns.retain(|x| map.get(x.protein_id.as_str()) == Some(&Split::Train));
    }
    let m = npmi_matrix(&build_cooccurrence(&anns, elig.num_types())?, elig.names())?;
    ctx.write(&a.out, m.to_json()?)?;
    let mut lines = Vec::new();
    for (i, row) in m.npmi.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:+.3}")).collect();
        lines.push(format!("{}\t{}", m.labels[i], cells.join("\t")));
    }
    Ok(Output::new(lines, json!({"labels": m.labels, "npmi": m.npmi})))
}

fn read_peptides(ctx: &mut RunContext, path: &Path) -> Result<Vec<PeptideSample>> {
    ctx.read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn history_path(out: &Path, explicit: &Option<std::path::PathBuf>) -> std::path::PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.jsonl");
        out.with_file_name(name)
    })
}

fn stage1(ctx: &mut RunContext, a: &Stage1Args) -> Result<Output> {
    let config = ctx.config(None)?;
    let peptides = read_peptides(ctx, &a.peptides)?;
    let split = read_split(ctx, &a.split)?;
    let prior = CrosstalkMatrix::from_json(&ctx.read_text(&a.prior)?)?;
    if prior.labels != config.types {
        return Err(CliError::Data(format!(
            "prior classes {:?} differ from the configured types {:?}",
            prior.labels, config.types
        )));
    }
    let map = split.as_map();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for p in peptides {
        match map.get(p.parent_id.as_str()) {
            Some(Split::Train) => train.push(p),
            Some(Split::Valid) => val.push(p),
            Some(Split::Test) => test.push(p),
            None => {
                return Err(CliError::Data(format!(
                    "protein {} has no split assignment",
                    p.parent_id
                )))
            }
        }
    }
    ctx.info(format!(
        "training on {} peptides, validating on {}",
        train.len(),
        val.len()
    ));
    let file = embeddings(ctx, &config)?;
    let mut model = MspnModel::new(&config, prior, file)?;
    let opts = TrainOptions {
        max_steps: a.max_steps,
        ..TrainOptions::default()
    };
    let report = train_stage1(&mut model, &train, &val, &opts)?;
    let bytes = model.to_checkpoint()?.to_bytes();
    ctx.write(&a.out, bytes)?;
    ctx.write(&history_path(&a.out, &a.history), report.to_jsonl()?)?;
    let test_f1 = if test.is_empty() {
        None
    } else {
        Some(evaluate_sites(&model, &test, 0.5, config.train.batch_size)?.macro_f1)
    };
    let mut lines = vec![format!(
        "{} steps, best epoch {}, best validation macro-F1 {}",
        report.steps,
        report.best_epoch.map_or("n/a".into(), |e| e.to_string()),
        report.best_score.map_or("n/a".into(), |s| format!("{s:.4}"))
    )];
    if let Some(f) = test_f1 {
        lines.push(format!("test macro-F1 {f:.4}"));
    }
    Ok(Output::new(
        lines,
        json!({
            "steps": report.steps,
            "best_epoch": report.best_epoch,
            "best_val_macro_f1": report.best_score,
            "test_macro_f1": test_f1,
        }),
    ))
}

fn partition(pairs: &[PairSample], kind: PairSplitKind, seed: u64) -> Result<[Vec<PairSample>; 3]> {
    let labels = match kind {
        PairSplitKind::Warm => warm_split(pairs, SPLIT_RATIOS, seed)?,
        PairSplitKind::SubstrateCold => substrate_cold_split(pairs, SPLIT_RATIOS, seed)?,
        PairSplitKind::EnzymeCold => enzyme_cold_split(pairs, SPLIT_RATIOS, seed)?,
    };
    let mut out: [Vec<PairSample>; 3] = Default::default();
    for (p, s) in pairs.iter().zip(labels) {
        let i = match s {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        };
        out[i].push(p.clone());
    }
    Ok(out)
}

fn pair_metrics(model: &EspsModel, pairs: &[PairSample]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<PairInput> = pairs.iter().map(PairInput::from).collect();
    let scores = model.predict(&inputs, PREDICT_BATCH)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label == 1).collect();
    match auroc(&scores, &labels) {
        Ok(v) => Ok(Some(v)),
        Err(ptm_core::Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn stage2(ctx: &mut RunContext, a: &Stage2Args) -> Result<Output> {
    let ck = read_checkpoint(ctx, &a.stage1)?;
    let base = ck.config()?;
    let explicit = ctx.opts.config.is_some();
    let config = ctx.config(Some(base.clone()))?;
    if explicit {
        ck.check_config(&config, a.force)?;
    }
    let file = embeddings(ctx, &base)?;
    let stage1 = MspnModel::from_checkpoint(&ck, file)?;
    let enzymes = read_fasta(ctx, &a.enzymes)?;
    let pairs = read_pairs(&ctx.read_text(&a.pairs)?, &enzyme_lookup(enzymes))?;
    let seed = config.stage2.seed;
    let [mut train, mut val, test] = partition(&pairs, a.split_kind, seed)?;
    if a.shuffle_labels {
        train = shuffled_labels(&train, seed);
        val = shuffled_labels(&val, derive(seed));
    }
    ctx.info(format!(
        "training on {} pairs, validating on {}",
        train.len(),
        val.len()
    ));
    let mut model = EspsModel::from_stage1(&stage1, &config)?;
    let opts = TrainOptions {
        max_steps: a.max_steps,
        ..TrainOptions::default()
    };
    let report = train_stage2(&mut model, &train, &val, &opts)?;
    ctx.write(&a.out, model.to_checkpoint()?.to_bytes())?;
    ctx.write(&history_path(&a.out, &a.history), report.to_jsonl()?)?;
    let test_auroc = pair_metrics(&model, &test)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |s| format!("{s:.4}"));
    Ok(Output::new(
        vec![
            format!(
                "{} steps, best validation AUROC {}",
                report.steps,
                fmt(report.best_score)
            ),
            format!("test AUROC {}", fmt(test_auroc)),
        ],
        json!({
            "steps": report.steps,
            "best_val_auroc": report.best_score,
            "test_auroc": test_auroc,
        }),
    ))
}

fn derive(seed: u64) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

/// 1-based window starts of length `m` covering `1..=len`.
pub fn tile_starts(len: usize, m: usize) -> Vec<usize> {
    if len <= m {
        return vec![1];
    }
    let mut starts: Vec<usize> = (0..).map(|k| 1 + k * m).take_while(|s| s + m - 1 < len).collect();
    starts.push(len - m + 1);
    starts
}

/// Per-residue rows over whole proteins, each residue taken from the first
/// window that covers it.
fn tiled(
    records: &[ProteinRecord],
    max_len: usize,
    f: impl Fn(&[ModelInput]) -> ptm_core::Result<Vec<ptm_core::tensor::Tensor>>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let starts = tile_starts(r.len(), max_len);
        let inputs: Vec<ModelInput> = starts
            .iter()
            .map(|&s| ModelInput {
                sequence: r.sequence[s - 1..(s - 1 + max_len).min(r.len())].to_string(),
                parent_id: r.id.clone(),
                start: s as i64,
            })
            .collect();
        let rows = f(&inputs)?;
        let mut per_residue = Vec::with_capacity(r.len());
        for i in 1..=r.len() {
            let w = starts
                .iter()
                .position(|&s| s <= i && i < s + max_len)
                .expect("tiles cover the protein");
            per_residue.push(rows[w].row(i - starts[w]).to_vec());
        }
        out.push(per_residue);
    }
    Ok(out)
}

const SCORED_PAIRS_HEADER: &str = "substrate_id\tcenter_position\tsubstrate_peptide\tenzyme_id\tptm_type\tlabel\tscore";

fn predict(ctx: &mut RunContext, a: &PredictArgs) -> Result<Output> {
    if let (Some(pp), Some(ep)) = (&a.pairs, &a.enzymes) {
        let ck = read_checkpoint(ctx, &a.model)?;
        let config = ck.config()?;
        ctx.config(Some(config.clone()))?;
        let file = embeddings(ctx, &config)?;
        let model = EspsModel::from_checkpoint(&ck, file)?;
        let enzymes = read_fasta(ctx, ep)?;
        let pairs = read_pairs(&ctx.read_text(pp)?, &enzyme_lookup(enzymes))?;
        let inputs: Vec<PairInput> = pairs.iter().map(PairInput::from).collect();
        let scores = model.predict(&inputs, PREDICT_BATCH)?;
        let body = write_pairs(&pairs);
        let mut out = String::from(SCORED_PAIRS_HEADER);
        out.push('\n');
        for (line, s) in body.lines().skip(1).zip(&scores) {
            let _ = writeln!(out, "{line}\t{s:.6}");
        }
        ctx.write(&a.out, out)?;
        return Ok(Output::new(
            vec![format!("{} pairs scored", pairs.len())],
            json!({"pairs": pairs.len()}),
        ));
    }
    let fasta = a.fasta.as_ref().expect("clap requires --fasta without --pairs");
    let model = load_site_model(ctx, &a.model)?;
    let records = read_fasta(ctx, fasta)?;
    let max_len = model.net.max_len;
    let probs = tiled(&records, max_len, |inp| model.predict(inp, PREDICT_BATCH))?;
    let mut preds = Vec::new();
    for (r, rows) in records.iter().zip(&probs) {
        for (i, (&res, row)) in r.sequence.as_bytes().iter().zip(rows).enumerate() {
            for (k, &p) in row.iter().enumerate() {
                if model.eligibility.is_eligible(k, res) {
                    preds.push(SitePrediction {
                        protein_id: r.id.clone(),
                        position: i + 1,
                        ptm_type: k,
                        score: p,
                    });
                }
            }
        }
    }
    ctx.write(&a.out, write_predictions(&preds, &model.eligibility))?;
    Ok(Output::new(
        vec![format!("{} site scores over {} proteins", preds.len(), records.len())],
        json!({"scores": preds.len(), "proteins": records.len()}),
    ))
}

fn evaluate_site(ctx: &mut RunContext, a: &EvalSiteArgs) -> Result<Output> {
    let config = ctx.config(None)?;
    let elig = eligibility(&config)?;
    let preds = read_predictions(&ctx.read_text(&a.pred)?, &elig)?;
    let labels = read_site_labels(&ctx.read_text(&a.labels)?, &elig)?;
    let scores: HashMap<(&str, usize, usize), f64> = preds
        .iter()
        .map(|p| ((p.protein_id.as_str(), p.position, p.ptm_type), p.score))
        .collect();
    let mut counts = vec![BinaryCounts::default(); elig.num_types()];
    for (id, pos, t, label) in &labels {
        let s = scores.get(&(id.as_str(), *pos, *t)).ok_or_else(|| {
            CliError::Data(format!(
                "no prediction for {id} position {pos} type {}",
                elig.types[*t].name
            ))
        })?;
        counts[*t].add(*s >= a.threshold, *label == 1);
    }
    let summary = summarize_counts(counts)?;
    let mut lines = Vec::new();
    let mut per_class = BTreeMap::new();
    for (k, c) in summary.per_class.iter().enumerate() {
        if c.total() == 0 {
            continue;
        }
        let m = confusion_metrics(c)?;
        let name = &elig.types[k].name;
        lines.push(format!(
            "{name}\tprecision {:.5}\trecall {:.5}\tf1 {:.5}\tmcc {:.5}",
            m.precision, m.recall, m.f1, m.mcc
        ));
        per_class.insert(name.clone(), json!({"counts": c, "metrics": m}));
    }
    lines.push(format!(
        "macro\tf1 {:.5}\tmcc {:.5}",
        summary.macro_f1, summary.macro_mcc
    ));
    Ok(Output::new(
        lines,
        json!({"per_class": per_class, "macro_f1": summary.macro_f1, "macro_mcc": summary.macro_mcc}),
    ))
}

/// One row of a scored-pairs file.
struct ScoredPair {
    substrate_id: String,
    center: String,
    peptide: String,
    enzyme_id: String,
    label: u8,
    score: f64,
}

fn read_scored_pairs(text: &str) -> Result<Vec<ScoredPair>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Data("scored pairs file is empty".into()))?
        .split('\t')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Data(format!("scored pairs file lacks a {name} column")))
    };
    let idx = [
        col("substrate_id")?,
        col("center_position")?,
        col("substrate_peptide")?,
        col("enzyme_id")?,
        col("label")?,
        col("score")?,
    ];
    lines
        .enumerate()
        .map(|(n, l)| {
            let c: Vec<&str> = l.split('\t').collect();
            let get = |i: usize| {
                c.get(idx[i])
                    .copied()
                    .ok_or_else(|| CliError::Data(format!("scored pairs row {}: missing column", n + 2)))
            };
            let num_err = |what: &str| CliError::Data(format!("scored pairs row {}: bad {what}", n + 2));
            Ok(ScoredPair {
                substrate_id: get(0)?.to_string(),
                center: get(1)?.to_string(),
                peptide: get(2)?.to_string(),
                enzyme_id: get(3)?.to_string(),
                label: get(4)?.trim().parse().map_err(|_| num_err("label"))?,
                score: get(5)?.trim().parse().map_err(|_| num_err("score"))?,
            })
        })
        .collect()
}

fn evaluate_pair(ctx: &mut RunContext, a: &EvalPairArgs) -> Result<Output> {
    let rows = read_scored_pairs(&ctx.read_text(&a.pred)?)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
    let roc = auroc(&scores, &labels)?;
    let pr = auprc(&scores, &labels)?;
    Ok(Output::new(
        vec![format!("auroc {roc:.5}\tauprc {pr:.5}")],
        json!({"auroc": roc, "auprc": pr, "pairs": rows.len()}),
    ))
}

fn evaluate_map(ctx: &mut RunContext, a: &EvalMapArgs) -> Result<Output> {
    let rows = read_rankings(&ctx.read_text(&a.rankings)?)?;
    let lists = group_rankings(&rows);
    let map = mean_average_precision(&lists)?;
    Ok(Output::new(
        vec![format!("map {map:.5}\tqueries {}", lists.len())],
        json!({"map": map, "queries": lists.len()}),
    ))
}

fn class_index(model: &MspnModel, name: &str) -> Result<usize> {
    Ok(parse_ptm_type(name, &model.eligibility, 0)?)
}

fn variant_effect(ctx: &mut RunContext, a: &VariantArgs) -> Result<Output> {
    let model = load_site_model(ctx, &a.model)?;
    let records = read_fasta(ctx, &a.fasta)?;
    let record = records
        .iter()
        .find(|r| r.id == a.protein)
        .ok_or_else(|| CliError::Data(format!("protein {} not in {}", a.protein, a.fasta.display())))?;
    let class = class_index(&model, &a.ptm_type)?;
    let window = a.window.unwrap_or(model.net.max_len);
    let mut effects = Vec::new();
    for v in &a.variants {
        let m: Mutation = v.parse()?;
        effects.push(variant_delta(&model, record, &m, a.site, window, class)?);
    }
    let mut table = String::from(VariantEffect::TSV_HEADER);
    table.push('\n');
    for e in &effects {
        table.push_str(&e.to_tsv_row());
        table.push('\n');
    }
    let lines = match &a.out {
        Some(p) => {
            ctx.write(p, &table)?;
            vec![format!("{} variants scored", effects.len())]
        }
        None => table.lines().map(String::from).collect(),
    };
    Ok(Output::new(lines, json!({"effects": effects})))
}

fn attribute(ctx: &mut RunContext, a: &AttributeArgs) -> Result<Output> {
    let model = load_site_model(ctx, &a.model)?;
    let peptide = a.peptide.to_ascii_uppercase();
    ptm_core::residues::tokenize(&peptide)?;
    let class = class_index(&model, &a.ptm_type)?;
    let scores = input_gradient_attribution(&model, &ModelInput::new(peptide.clone()), a.position, class)?;
    let mut table = String::from("position\tresidue\tscore\n");
    for (i, (s, r)) in scores.iter().zip(peptide.chars()).enumerate() {
        let _ = writeln!(table, "{}\t{r}\t{s:.6e}", i + 1);
    }
    let lines = match &a.out {
        Some(p) => {
            ctx.write(p, &table)?;
            vec![format!("{} residues attributed", scores.len())]
        }
        None => table.lines().map(String::from).collect(),
    };
    Ok(Output::new(lines, json!({"scores": scores})))
}

fn logo(ctx: &mut RunContext, a: &MotifLogoArgs) -> Result<Output> {
    let rows = read_scored_pairs(&ctx.read_text(&a.pred)?)?;
    let scored: Vec<ScoredPeptide> = rows
        .into_iter()
        .map(|r| ScoredPeptide {
            id: format!("{}:{}", r.substrate_id, r.center),
            group: r.enzyme_id,
            peptide: r.peptide,
            score: r.score,
        })
        .collect();
    let logo = motif_logo(&scored, &a.group, a.top_k, a.threshold)?;
    ctx.write(&a.out, logo.to_tsv())?;
    Ok(Output::new(
        vec![format!("{} windows pooled for {}", logo.rows_used, logo.group)],
        json!({"group": logo.group, "rows_used": logo.rows_used}),
    ))
}

fn gradcheck(ctx: &mut RunContext, a: &GradcheckArgs) -> Result<Output> {
    let seed = ctx.seed()?;
    let cases = match a.group.as_deref() {
        _ if a.all => gradsuite::run_all(seed)?,
        None | Some("op") => gradsuite::op_cases(seed, 3)?,
        Some("block") | Some("loss") => gradsuite::block_cases(seed)?
            .into_iter()
            .filter(|c| Some(c.group.as_str()) == a.group.as_deref())
            .collect(),
        Some("model") => gradsuite::model_cases(seed)?,
        Some(other) => return Err(CliError::Usage(format!("unknown gradient group {other:?}"))),
    };
    let mut lines = Vec::with_capacity(cases.len() + 1);
    let mut failed = Vec::new();
    for c in &cases {
        let ok = c.passed(a.tol);
        if !ok {
            failed.push(format!("{}/{}", c.group, c.name));
        }
        lines.push(format!(
            "{}\t{}/{}\tmax_rel_err {:.3e}\tcoords {}",
            if ok { "ok" } else { "FAIL" },
            c.group,
            c.name,
            c.max_rel_err,
            c.coords
        ));
    }
    lines.push(format!(
        "{} of {} cases within {:e}",
        cases.len() - failed.len(),
        cases.len(),
        a.tol
    ));
    if !failed.is_empty() {
        for l in &lines {
            println!("{l}");
        }
        return Err(CliError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    let json = json!({
        "tolerance": a.tol,
        "cases": cases.iter().map(|c| json!({
            "group": c.group, "name": c.name, "max_rel_err": c.max_rel_err, "coords": c.coords,
        })).collect::<Vec<_>>(),
    });
    Ok(Output::new(lines, json))
}

fn export_embeddings(ctx: &mut RunContext, a: &ExportArgs) -> Result<Output> {
    let model = load_site_model(ctx, &a.model)?;
    let records = read_fasta(ctx, &a.fasta)?;
    let states = tiled(&records, model.net.max_len, |inp| {
        model.hidden_states(inp, PREDICT_BATCH)
    })?;
    let d = model.net.d;
    let mut emb = FileEmbeddings {
        dim: d,
        records: HashMap::new(),
    };
    for (r, rows) in records.iter().zip(states) {
        let t = ptm_core::tensor::Tensor::new([rows.len(), d], rows.concat()).map_err(ptm_core::Error::from)?;
        emb.records.insert(r.id.clone(), t);
    }
    ctx.write(&a.out, emb.to_bytes())?;
    Ok(Output::new(
        vec![format!("{} proteins, dim {d}", records.len())],
        json!({"proteins": records.len(), "dim": d}),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_cover_every_residue() {
        assert_eq!(tile_starts(30, 50), vec![1]);
        assert_eq!(tile_starts(50, 50), vec![1]);
        assert_eq!(tile_starts(120, 50), vec![1, 51, 71]);
        for len in 1..200 {
            let s = tile_starts(len, 17);
            for i in 1..=len {
                assert!(s.iter().any(|&st| st <= i && i < st + 17), "len {len} residue {i}");
            }
            assert!(s.iter().all(|&st| st + 17.min(len) - 1 <= len));
        }
    }

    #[test]
    fn ratios_parse() {
        assert_eq!(parse_ratios("0.8,0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
        assert!(parse_ratios("0.8,0.2").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }
}
