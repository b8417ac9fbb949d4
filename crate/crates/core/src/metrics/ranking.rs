use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    Ok(())
}

fn class_sizes(labels: &[bool]) -> Result<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("degenerate labels: both classes are required".into()));
    }
    Ok((pos as f64, neg as f64))
}

/// Mann–Whitney statistic with average ranks for tied scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let (n1, n0) = class_sizes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Trapezoidal area under the ROC curve from a threshold sweep.
pub fn auroc_trapezoid(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let (n1, n0) = class_sizes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) / n0 * (tp + tp0) / (2.0 * n1);
    }
    Ok(area)
}

/// Average precision of relevance bits already in rank order.
fn ap_ranked(relevant: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut sum, mut k) = (0usize, 0.0, 0usize);
    for r in relevant {
        k += 1;
        if r {
            hits += 1;
            sum += hits as f64 / k as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Step-wise area under the precision–recall curve: precision at each
/// positive's rank times its recall increment. Ties keep input order.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ap_ranked(idx.iter().map(|&i| labels[i])).ok_or_else(|| Error::Degenerate("no positive labels".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub candidate_id: String,
    pub score: f64,
    pub relevant: bool,
}

/// Candidates of one query, ordered by score descending with ties broken
/// by candidate id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, mut items: Vec<RankedItem>) -> Self {
        items.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.candidate_id.cmp(&b.candidate_id))
        });
        Self {
            query_id: query_id.into(),
            items,
        }
    }

    pub fn average_precision(&self) -> Result<f64> {
        ap_ranked(self.items.iter().map(|i| i.relevant))
            .ok_or_else(|| Error::Degenerate(format!("query {} has no relevant candidate", self.query_id)))
    }
}

/// Unweighted mean of per-query average precision.
pub fn mean_average_precision(queries: &[RankedList]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Degenerate("no queries".into()));
    }
    let mut total = 0.0;
    for q in queries {
        total += q.average_precision()?;
    }
    Ok(total / queries.len() as f64)
}

/// Groups flat ranking rows into per-query lists, in first-seen order.
pub fn group_rankings(rows: &[crate::data::tsv::RankingRow]) -> Vec<RankedList> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<RankedItem>> = std::collections::HashMap::new();
    for r in rows {
        if !groups.contains_key(&r.query_id) {
            order.push(r.query_id.clone());
        }
        groups.entry(r.query_id.clone()).or_default().push(RankedItem {
            candidate_id: r.candidate_id.clone(),
            score: r.score,
            relevant: r.relevant,
        });
    }
    order
        .into_iter()
        .map(|q| {
            let items = groups.remove(&q).unwrap_or_default();
            RankedList::new(q, items)
        })
        .collect()
}
