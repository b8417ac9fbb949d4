//! Stage-1 and Stage-2 optimisation loops with early stopping.

use ptm_tensor::rng::{derive_seed, stream, Stream};
use ptm_tensor::{Adam, AdamConfig, Graph, Mode, ParamStore, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::esps::{EspsModel, PairInput};
use super::mspn::{ModelInput, MspnModel};
use crate::data::{PairSample, PeptideSample};
use crate::error::{data_err, Error, Result};
use crate::losses::bce_loss;
use crate::metrics::{auroc, confusion_metrics, macro_average, BinaryCounts};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    /// Validation macro-F1 (Stage 1) or AUROC (Stage 2).
    pub val_score: Option<f64>,
    /// Validation macro-MCC, Stage 1 only.
    pub val_mcc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Loss of every optimiser step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub steps: u64,
}

impl TrainReport {
    /// JSON-lines rendering of `history`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.history {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Loop controls beyond [`TrainConfig`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many optimiser steps, possibly mid-epoch.
    pub max_steps: Option<u64>,
    /// Threshold for calling a site positive during validation; 0.5 when unset.
    pub threshold: Option<f64>,
}

fn numeric(e: Error, step: u64) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Numeric(format!(
            "non-finite value in {op} at step {step}; lower the learning rate"
        )),
        other => other,
    }
}

fn adam(cfg: &TrainConfig) -> Adam {
    Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    })
}

/// Per-class confusion counts and their macro summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteEvaluation {
    pub per_class: Vec<BinaryCounts>,
    pub macro_f1: f64,
    pub macro_mcc: f64,
    /// Classes without a positive residue, left out of the averages.
    pub excluded: Vec<usize>,
}

/// Builds a [`SiteEvaluation`] from per-class counts.
pub fn summarize_counts(per_class: Vec<BinaryCounts>) -> Result<SiteEvaluation> {
    let mut f1 = Vec::with_capacity(per_class.len());
    let mut mcc = Vec::with_capacity(per_class.len());
    let support: Vec<u64> = per_class.iter().map(BinaryCounts::support).collect();
    for c in &per_class {
        if c.total() == 0 {
            f1.push(0.0);
            mcc.push(0.0);
        } else {
            let m = confusion_metrics(c)?;
            f1.push(m.f1);
            mcc.push(m.mcc);
        }
    }
    let f = macro_average(&f1, &support)?;
    let m = macro_average(&mcc, &support)?;
    Ok(SiteEvaluation {
        per_class,
        macro_f1: f.value,
        macro_mcc: m.value,
        excluded: f.excluded,
    })
}

/// Scores every residue eligible for a class against its window label.
pub fn evaluate_sites(
    model: &MspnModel,
    samples: &[PeptideSample],
    threshold: f64,
    batch_size: usize,
) -> Result<SiteEvaluation> {
    let inputs: Vec<ModelInput> = samples.iter().map(ModelInput::from).collect();
    let probs = model.predict(&inputs, batch_size)?;
    let c = model.net.num_types;
    let mut per_class = vec![BinaryCounts::default(); c];
    for (s, p) in samples.iter().zip(&probs) {
        for (i, &res) in s.sequence.as_bytes().iter().enumerate() {
            for (k, counts) in per_class.iter_mut().enumerate() {
                if model.eligibility.is_eligible(k, res) {
                    counts.add(p.at2(i, k) >= threshold, s.labels[i][k] == 1);
                }
            }
        }
    }
    summarize_counts(per_class)
}

/// Minimises the configured site loss with Adam, keeping the parameters of
/// the epoch with the best validation macro-F1. With an empty validation
/// set the final parameters are kept.
pub fn train_stage1(
    model: &mut MspnModel,
    train: &[PeptideSample],
    val: &[PeptideSample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = model.config.train.clone();
    cfg.validate()?;
    let usable: Vec<&PeptideSample> = train.iter().filter(|s| s.site_mask.iter().any(|&m| m)).collect();
    if usable.is_empty() {
        return Err(data_err("training split has no eligible residues"));
    }
    let threshold = opts.threshold.unwrap_or(0.5);
    let mut opt = adam(&cfg);
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<ParamStore> = None;
    let mut stale = 0usize;
    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if opts.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let batch: Vec<PeptideSample> = chunk.iter().map(|&i| usable[i].clone()).collect();
            let step = report.steps;
            let grads = {
                let mut g = Graph::new(&model.store, Mode::Train, derive_seed(cfg.seed, step));
                let loss = model.net.loss(&mut g, &batch).map_err(|e| numeric(e, step))?;
                let lv = g.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("loss is {lv} at step {step}")));
                }
                total += lv;
                report.step_losses.push(lv);
                let grads = g.backward(loss).map_err(|e| numeric(e.into(), step))?;
                g.param_grads(&grads)
            };
            opt.step(&mut model.store, &grads)?;
            report.steps += 1;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let mut rec = EpochRecord {
            stage: 1,
            epoch,
            steps: report.steps,
            train_loss: total / batches as f64,
            val_score: None,
            val_mcc: None,
        };
        let mut stop = false;
        if !val.is_empty() {
            let ev = evaluate_sites(model, val, threshold, cfg.batch_size)?;
            rec.val_score = Some(ev.macro_f1);
            rec.val_mcc = Some(ev.macro_mcc);
            if report.best_score.is_none_or(|b| ev.macro_f1 > b) {
                report.best_score = Some(ev.macro_f1);
                report.best_epoch = Some(epoch);
                best = Some(model.store.clone());
                stale = 0;
            } else {
                stale += 1;
                stop = stale >= cfg.patience;
            }
        }
        log::info!(
            "stage1 epoch {epoch}: loss {:.5} val_f1 {:?} val_mcc {:?}",
            rec.train_loss,
            rec.val_score,
            rec.val_mcc
        );
        report.history.push(rec);
        if stop {
            break 'epochs;
        }
    }
    if let Some(b) = best {
        model.store = b;
    }
    Ok(report)
}

/// Frozen Stage-1 states for many pairs, computed in chunks.
pub fn cached_substrate_states(model: &EspsModel, pairs: &[PairInput], chunk: usize) -> Result<Tensor> {
    let d = model.net.d;
    let mut data = Vec::with_capacity(pairs.len() * d);
    for c in pairs.chunks(chunk.max(1)) {
        data.extend_from_slice(model.substrate_states(c)?.data());
    }
    Ok(Tensor::new([pairs.len(), d], data)?)
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Ok(Tensor::new([idx.len(), d], data)?)
}

/// Pair probabilities from cached substrate states.
pub fn predict_cached(model: &EspsModel, states: &Tensor, enzymes: &[&str], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(enzymes.len());
    let idx: Vec<usize> = (0..enzymes.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let h = rows_of(states, chunk)?;
        let enz: Vec<&str> = chunk.iter().map(|&i| enzymes[i]).collect();
        let mut g = Graph::new(&model.store, Mode::Eval, 0);
        let z = model.forward_cached(&mut g, &h, &enz)?;
        let p = g.tape.sigmoid(z)?;
        out.extend_from_slice(g.value(p).data());
    }
    Ok(out)
}

/// Binary cross-entropy training of the pairing head over a frozen Stage-1
/// network, keeping the epoch with the best validation AUROC.
pub fn train_stage2(
    model: &mut EspsModel,
    train: &[PairSample],
    val: &[PairSample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = model.config.stage2.clone();
    cfg.validate()?;
    if train.is_empty() {
        return Err(data_err("training split is empty"));
    }
    let to_inputs = |s: &[PairSample]| s.iter().map(PairInput::from).collect::<Vec<_>>();
    let train_in = to_inputs(train);
    let val_in = to_inputs(val);
    let train_states = cached_substrate_states(model, &train_in, 256)?;
    let val_states = cached_substrate_states(model, &val_in, 256)?;
    let val_enz: Vec<&str> = val.iter().map(|p| p.enzyme_sequence.as_str()).collect();
    let val_labels: Vec<bool> = val.iter().map(|p| p.label == 1).collect();

    let mut opt = adam(&cfg);
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<ParamStore> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if opts.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let step = report.steps;
            let h = rows_of(&train_states, chunk)?;
            let enz: Vec<&str> = chunk.iter().map(|&i| train[i].enzyme_sequence.as_str()).collect();
            let labels = Tensor::new(
                [chunk.len(), 1],
                chunk.iter().map(|&i| f64::from(train[i].label)).collect(),
            )?;
            let grads = {
                let mut g = Graph::new(&model.store, Mode::Train, derive_seed(cfg.seed, step));
                let z = model.forward_cached(&mut g, &h, &enz).map_err(|e| numeric(e, step))?;
                let loss = bce_loss(&mut g.tape, z, &labels).map_err(|e| numeric(e, step))?;
                let lv = g.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("loss is {lv} at step {step}")));
                }
                total += lv;
                report.step_losses.push(lv);
                let grads = g.backward(loss).map_err(|e| numeric(e.into(), step))?;
                g.param_grads(&grads)
            };
            opt.step(&mut model.store, &grads)?;
            report.steps += 1;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let mut rec = EpochRecord {
            stage: 2,
            epoch,
            steps: report.steps,
            train_loss: total / batches as f64,
            val_score: None,
            val_mcc: None,
        };
        let mut stop = false;
        if !val.is_empty() {
            let p = predict_cached(model, &val_states, &val_enz, cfg.batch_size)?;
            let a = auroc(&p, &val_labels)?;
            rec.val_score = Some(a);
            if report.best_score.is_none_or(|b| a > b) {
                report.best_score = Some(a);
                report.best_epoch = Some(epoch);
                best = Some(model.store.clone());
                stale = 0;
            } else {
                stale += 1;
                stop = stale >= cfg.patience;
            }
        }
        log::info!(
            "stage2 epoch {epoch}: loss {:.5} val_auroc {:?}",
            rec.train_loss,
            rec.val_score
        );
        report.history.push(rec);
        if stop {
            break;
        }
    }
    if let Some(b) = best {
        model.store = b;
    }
    Ok(report)
}
