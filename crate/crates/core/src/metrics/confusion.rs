use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            c.add(p, a);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Ground-truth positives.
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy, precision, recall, F1 and MCC. Zero denominators give 0.
pub fn confusion_metrics(c: &BinaryCounts) -> Result<ConfusionMetrics> {
    if c.total() == 0 {
        return Err(Error::Degenerate("confusion counts are all zero".into()));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den.sqrt()
    };
    Ok(ConfusionMetrics {
        accuracy: (tp + tn) / (tp + tn + fp + fn_),
        precision,
        recall,
        f1,
        mcc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub value: f64,
    /// Indices of classes left out for lacking positives.
    pub excluded: Vec<usize>,
}

/// Unweighted mean over classes with at least one ground-truth positive.
pub fn macro_average(values: &[f64], support: &[u64]) -> Result<MacroAverage> {
    if values.len() != support.len() {
        return Err(Error::Data("per-class values and supports differ in length".into()));
    }
    let excluded: Vec<usize> = (0..values.len()).filter(|&i| support[i] == 0).collect();
    let kept: Vec<f64> = (0..values.len())
        .filter(|&i| support[i] > 0)
        .map(|i| values[i])
        .collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("no class has a positive example".into()));
    }
    Ok(MacroAverage {
        value: kept.iter().sum::<f64>() / kept.len() as f64,
        excluded,
    })
}
