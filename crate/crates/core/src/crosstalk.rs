//! Co-occurrence counting, the nPMI crosstalk prior, the learned
//! relationship matrix and the prompt bias added to attention logits.

use std::collections::{BTreeMap, BTreeSet};

use ptm_tensor::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::PtmAnnotation;
use crate::error::{data_err, Error, Result};

/// Per-site type co-occurrence counts. A site is a distinct
/// (protein, position).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub num_types: usize,
    pub joint: Vec<Vec<u64>>,
    pub marginal: Vec<u64>,
    pub total_sites: u64,
}

impl CooccurrenceCounts {
    pub fn zeros(num_types: usize) -> Self {
        Self {
            num_types,
            joint: vec![vec![0; num_types]; num_types],
            marginal: vec![0; num_types],
            total_sites: 0,
        }
    }
}

pub fn build_cooccurrence(annotations: &[PtmAnnotation], num_types: usize) -> Result<CooccurrenceCounts> {
    let mut sites: BTreeMap<(&str, usize), BTreeSet<usize>> = BTreeMap::new();
    for a in annotations {
        if a.ptm_type >= num_types {
            return Err(data_err(format!(
                "PTM type index {} out of range for {num_types} types",
                a.ptm_type
            )));
        }
        sites
            .entry((a.protein_id.as_str(), a.position))
            .or_default()
            .insert(a.ptm_type);
    }
    let mut counts = CooccurrenceCounts::zeros(num_types);
    counts.total_sites = sites.len() as u64;
    for types in sites.values() {
        for &a in types {
            counts.marginal[a] += 1;
            for &b in types {
                if a != b {
                    counts.joint[a][b] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Symmetric, zero-diagonal prior with entries in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkMatrix {
    pub num_types: usize,
    pub labels: Vec<String>,
    pub npmi: Vec<Vec<f64>>,
}

impl CrosstalkMatrix {
    /// All-zero prior, equivalent to no known crosstalk.
    pub fn zeros(labels: Vec<String>) -> Self {
        let c = labels.len();
        Self {
            num_types: c,
            labels,
            npmi: vec![vec![0.0; c]; c],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let c = self.num_types;
        Tensor::from_fn([c, c], |i| self.npmi[i / c][i % c])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_types;
        if self.labels.len() != c || self.npmi.len() != c || self.npmi.iter().any(|r| r.len() != c) {
            return Err(data_err("crosstalk matrix dimensions disagree with num_types"));
        }
        for i in 0..c {
            if self.npmi[i][i] != 0.0 {
                return Err(data_err("crosstalk matrix diagonal must be zero"));
            }
            for j in 0..c {
                let v = self.npmi[i][j];
                if !(-1.0..=1.0).contains(&v) || v != self.npmi[j][i] {
                    return Err(data_err("crosstalk matrix must be symmetric within [-1, 1]"));
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::needless_range_loop)]
pub fn npmi_matrix(counts: &CooccurrenceCounts, labels: Vec<String>) -> Result<CrosstalkMatrix> {
    if counts.total_sites == 0 {
        return Err(Error::Degenerate("no annotated sites to compute nPMI".into()));
    }
    let c = counts.num_types;
    if labels.len() != c {
        return Err(data_err("label count differs from number of types"));
    }
    let total = counts.total_sites as f64;
    let mut npmi = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            if a == b {
                continue;
            }
            let (ma, mb) = (counts.marginal[a], counts.marginal[b]);
            let joint = counts.joint[a][b];
            npmi[a][b] = if ma == 0 || mb == 0 {
                0.0
            } else if joint == 0 {
                -1.0
            } else {
                let pab = joint as f64 / total;
                let (pa, pb) = (ma as f64 / total, mb as f64 / total);
                if pab >= 1.0 {
                    1.0
                } else {
                    ((pab / (pa * pb)).ln() / -pab.ln()).clamp(-1.0, 1.0)
                }
            };
        }
    }
    // The formula is symmetric in (a, b); copying the upper triangle makes
    // the stored matrix exactly symmetric despite rounding.
    for a in 0..c {
        for b in 0..a {
            npmi[a][b] = npmi[b][a];
        }
    }
    Ok(CrosstalkMatrix {
        num_types: c,
        labels,
        npmi,
    })
}

/// Learnable pieces of the prompt path.
#[derive(Clone, Debug)]
pub struct PromptParams {
    pub proj_a: ParamId,
    pub proj_b: ParamId,
    pub alpha: ParamId,
    pub dropout_rate: f64,
}

impl PromptParams {
    /// Identity projections and a small bias scale.
    pub fn init(store: &mut ParamStore, prefix: &str, num_types: usize, alpha: f64, dropout_rate: f64) -> Self {
        Self {
            proj_a: store.add(format!("{prefix}.proj_a"), Tensor::eye(num_types), true),
            proj_b: store.add(format!("{prefix}.proj_b"), Tensor::eye(num_types), true),
            alpha: store.add(format!("{prefix}.alpha"), Tensor::full([1], alpha), true),
            dropout_rate,
        }
    }
}

/// `R = (P·A)(P·B)ᵀ`.
pub fn project_prior(tape: &mut Tape, prior: Var, proj_a: Var, proj_b: Var) -> Result<Var> {
    let pa = tape.matmul(prior, proj_a)?;
    let pb = tape.matmul(prior, proj_b)?;
    Ok(tape.matmul_t(pa, pb)?)
}

/// Binds the parameters and builds `R` inside a graph.
pub fn relationship_matrix(g: &mut Graph, prior: &CrosstalkMatrix, params: &PromptParams) -> Result<Var> {
    let p = g.input(prior.to_tensor());
    let a = g.param(params.proj_a);
    let b = g.param(params.proj_b);
    project_prior(&mut g.tape, p, a, b)
}

fn check_probability_rows(t: &Tensor) -> Result<()> {
    let c = t.last_dim();
    for row in t.data().chunks(c.max(1)) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(data_err(format!(
                "prompt input row is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Site-pair bias for `n` sequences of length `l`.
///
/// `p` holds per-residue type distributions as `[n·l × C]`; the result is
/// `[n × l × l]` with `B_ij = alpha · dropout(tanh(p_iᵀ R p_j))`.
pub fn prompt_bias_batched(
    g: &mut Graph,
    p: Var,
    n: usize,
    l: usize,
    r: Var,
    params: &PromptParams,
    site: &str,
) -> Result<Var> {
    check_probability_rows(g.value(p))?;
    let c = g.value(p).last_dim();
    let pr = g.tape.matmul(p, r)?;
    let pr3 = g.tape.reshape(pr, [n, l, c])?;
    let p3 = g.tape.reshape(p, [n, l, c])?;
    let s = g.tape.bmm(pr3, p3, true)?;
    let t = g.tape.tanh(s)?;
    let d = g.dropout(t, params.dropout_rate, site)?;
    let alpha = g.param(params.alpha);
    Ok(g.tape.mul_scalar(d, alpha)?)
}

/// Single-sequence bias: `p` is `[L × C]`, the result `[L × L]`.
pub fn prompt_bias(g: &mut Graph, p: Var, r: Var, params: &PromptParams, site: &str) -> Result<Var> {
    let l = g.value(p).shape()[0];
    let b = prompt_bias_batched(g, p, 1, l, r, params, site)?;
    Ok(g.tape.reshape(b, [l, l])?)
}

/// Attention weights `softmax(QKᵀ/√d + B)` for single-head `[L × d]` inputs.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, bias: Option<Var>) -> Result<Var> {
    let d = tape.value(q).last_dim();
    if d == 0 {
        return Err(data_err("attention needs a positive key dimension"));
    }
    let s = tape.matmul_t(q, k)?;
    let mut s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    if let Some(b) = bias {
        s = tape.add(s, b)?;
    }
    Ok(tape.softmax_lastdim(s)?)
}

/// `softmax(QKᵀ/√d + B)·V`.
pub fn prompted_attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    let w = attention_weights(tape, q, k, bias)?;
    Ok(tape.matmul(w, v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ptm_tensor::Mode;

    fn ann(id: &str, pos: usize, t: usize) -> PtmAnnotation {
        PtmAnnotation {
            protein_id: id.into(),
            position: pos,
            residue: b'K',
            ptm_type: t,
        }
    }

    fn labels(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn hand_counted_example() {
        let a = vec![
            ann("p", 1, 0),
            ann("p", 1, 1),
            ann("p", 2, 0),
            ann("q", 1, 1),
            ann("q", 1, 1),
        ];
        let c = build_cooccurrence(&a, 2).unwrap();
        assert_eq!(c.joint[0][1], 1);
        assert_eq!(c.joint[1][0], 1);
        assert_eq!(c.marginal, vec![2, 2]);
        assert_eq!(c.total_sites, 3);
        let m = npmi_matrix(&c, labels(2)).unwrap();
        let oracle = ((1.0f64 / 3.0) / (4.0 / 9.0)).ln() / -(1.0f64 / 3.0).ln();
        assert!((m.npmi[0][1] - oracle).abs() < 1e-12);
        assert!((m.npmi[0][1] + 0.2618).abs() < 1e-4);
    }

    #[test]
    fn empty_and_out_of_range() {
        let c = build_cooccurrence(&[], 3).unwrap();
        assert_eq!(c, CooccurrenceCounts::zeros(3));
        assert!(npmi_matrix(&c, labels(3)).is_err());
        assert!(build_cooccurrence(&[ann("p", 1, 5)], 3).is_err());
    }

    #[test]
    fn json_round_trip() {
        let a = vec![ann("p", 1, 0), ann("p", 1, 1), ann("p", 2, 2)];
        let m = npmi_matrix(&build_cooccurrence(&a, 3).unwrap(), labels(3)).unwrap();
        let back = CrosstalkMatrix::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn identity_projection_gives_prior_times_its_transpose() {
        let mut store = ParamStore::new();
        let params = PromptParams::init(&mut store, "prompt", 2, 0.1, 0.1);
        let prior = CrosstalkMatrix {
            num_types: 2,
            labels: labels(2),
            npmi: vec![vec![0.0, 0.5], vec![0.5, 0.0]],
        };
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let r = relationship_matrix(&mut g, &prior, &params).unwrap();
        assert_eq!(g.value(r).data(), &[0.25, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn malformed_probabilities_are_rejected() {
        let mut store = ParamStore::new();
        let params = PromptParams::init(&mut store, "prompt", 2, 0.1, 0.0);
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let p = g.input(Tensor::new([2, 2], vec![0.5, 0.6, 1.0, 0.0]).unwrap());
        let r = g.input(Tensor::eye(2));
        assert!(prompt_bias(&mut g, p, r, &params, "b").is_err());
    }
}
