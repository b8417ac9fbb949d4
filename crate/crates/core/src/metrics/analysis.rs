use ptm_tensor::{Graph, Mode, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ProteinRecord;
use crate::error::{data_err, Error, Result};
use crate::models::{ModelInput, MspnModel};
use crate::residues::AMINO_ACIDS;

/// Per-row gradient×input: `Σ_k ∂target/∂x[i,k] · x[i,k]`.
pub fn gradient_times_input(tape: &Tape, target: Var, input: Var) -> Result<Vec<f64>> {
    let grads = tape.backward(target)?;
    let g = grads.wrt(tape, input);
    let x = tape.value(input);
    let d = x.last_dim().max(1);
    Ok(g.data()
        .chunks(d)
        .zip(x.data().chunks(d))
        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
        .collect())
}

/// Signed per-residue attribution of one class logit at a 1-based peptide
/// position; positive scores support the prediction.
pub fn input_gradient_attribution(
    model: &MspnModel,
    peptide: &ModelInput,
    position: usize,
    class: usize,
) -> Result<Vec<f64>> {
    let len = peptide.sequence.len();
    if position == 0 || position > len {
        return Err(data_err(format!(
            "position {position} outside a peptide of length {len}"
        )));
    }
    if class >= model.net.num_types {
        return Err(data_err(format!("class {class} out of range")));
    }
    let mut g = Graph::new(&model.store, Mode::Eval, 0);
    let out = model.net.forward(&mut g, std::slice::from_ref(peptide), true)?;
    let input = out.input_embedding.expect("input rows requested");
    let row = g.tape.gather_rows(out.logits, &[position - 1])?;
    let mut pick = vec![0.0; model.net.num_types];
    pick[class] = 1.0;
    let pick = g.input(Tensor::new([1, model.net.num_types], pick)?);
    let sel = g.tape.mul(row, pick)?;
    let target = g.tape.sum(sel)?;
    gradient_times_input(&g.tape, target, input)
}

/// One scored substrate window used to build logos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPeptide {
    pub id: String,
    pub group: String,
    pub peptide: String,
    pub score: f64,
}

/// Position × residue frequency matrix in `AMINO_ACIDS` column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifLogo {
    pub group: String,
    pub rows_used: usize,
    pub frequencies: Vec<[f64; 20]>,
}

impl MotifLogo {
    /// Frequency of `letter` at 0-based window offset `col`.
    pub fn frequency(&self, col: usize, letter: u8) -> f64 {
        AMINO_ACIDS
            .iter()
            .position(|&a| a == letter)
            .map_or(0.0, |k| self.frequencies[col][k])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("offset");
        for &a in AMINO_ACIDS {
            s.push('\t');
            s.push(a as char);
        }
        s.push('\n');
        let half = self.frequencies.len() as i64 / 2;
        for (i, row) in self.frequencies.iter().enumerate() {
            s.push_str(&(i as i64 - half).to_string());
            for v in row {
                s.push_str(&format!("\t{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Residue frequencies over the `top_k` highest-scoring windows of `group`
/// predicted positive (`score ≥ threshold`). `X` is not counted.
pub fn motif_logo(preds: &[ScoredPeptide], group: &str, top_k: usize, threshold: f64) -> Result<MotifLogo> {
    let mut chosen: Vec<&ScoredPeptide> = preds
        .iter()
        .filter(|p| p.group == group && p.score >= threshold)
        .collect();
    if chosen.is_empty() {
        return Err(Error::Degenerate(format!("no predicted-positive windows for {group}")));
    }
    chosen.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    chosen.truncate(top_k.max(1));
    let len = chosen[0].peptide.len();
    if chosen.iter().any(|p| p.peptide.len() != len) {
        return Err(data_err("logo windows differ in length"));
    }
    let mut frequencies = vec![[0.0; 20]; len];
    for (col, freq) in frequencies.iter_mut().enumerate() {
        let mut counted = 0usize;
        for p in &chosen {
            let b = p.peptide.as_bytes()[col];
            if let Some(k) = AMINO_ACIDS.iter().position(|&a| a == b) {
                freq[k] += 1.0;
                counted += 1;
            }
        }
        if counted > 0 {
            freq.iter_mut().for_each(|v| *v /= counted as f64);
        }
    }
    Ok(MotifLogo {
        group: group.to_string(),
        rows_used: chosen.len(),
        frequencies,
    })
}

/// A point substitution such as `P616L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mutation {
    pub reference: u8,
    /// 1-based position.
    pub position: usize,
    pub alternate: u8,
}

impl std::str::FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.trim().as_bytes();
        let bad = || data_err(format!("mutation {s:?} is not of the form P616L"));
        if b.len() < 3 {
            return Err(bad());
        }
        let (r, a) = (b[0].to_ascii_uppercase(), b[b.len() - 1].to_ascii_uppercase());
        if !AMINO_ACIDS.contains(&r) || !AMINO_ACIDS.contains(&a) {
            return Err(bad());
        }
        let position: usize = std::str::from_utf8(&b[1..b.len() - 1])
            .ok()
            .and_then(|p| p.parse().ok())
            .filter(|&p| p > 0)
            .ok_or_else(bad)?;
        Ok(Self {
            reference: r,
            position,
            alternate: a,
        })
    }
}

impl std::fmt::Display for Mutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}{}",
            self.reference as char, self.position, self.alternate as char
        )
    }
}

/// One row of a variant-effect table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantEffect {
    pub protein: String,
    pub variant: String,
    pub site: usize,
    pub ptm_type: String,
    pub wt_prob: f64,
    pub mt_prob: f64,
    pub diff: f64,
}

impl VariantEffect {
    pub const TSV_HEADER: &'static str = "protein\tvariant\tsite\tptm_type\twt_prob\tmt_prob\tdiff";

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.protein, self.variant, self.site, self.ptm_type, self.wt_prob, self.mt_prob, self.diff
        )
    }
}

/// 1-based window start of length `len` around `site`, clamped inside
/// the sequence.
pub fn centered_window(seq_len: usize, site: usize, len: usize) -> usize {
    let len = len.min(seq_len);
    let lo = site.saturating_sub((len - 1) / 2).max(1);
    lo.min(seq_len - len + 1)
}

/// Scores `class` at `site` on the wild-type and mutated sequence over the
/// same window coordinates; `diff = mt − wt`.
pub fn variant_delta(
    model: &MspnModel,
    record: &ProteinRecord,
    mutation: &Mutation,
    site: usize,
    window_len: usize,
    class: usize,
) -> Result<VariantEffect> {
    let seq = record.sequence.as_bytes();
    if mutation.position > seq.len() || seq[mutation.position - 1] != mutation.reference {
        return Err(data_err(format!(
            "variant {mutation} does not match sequence {}",
            record.id
        )));
    }
    if site == 0 || site > seq.len() {
        return Err(data_err(format!("site {site} outside {}", record.id)));
    }
    if class >= model.net.num_types {
        return Err(data_err(format!("class {class} out of range")));
    }
    let len = window_len.min(seq.len()).min(model.net.max_len);
    let start = centered_window(seq.len(), site, len);
    let mut mutated = seq.to_vec();
    mutated[mutation.position - 1] = mutation.alternate;
    let window = |s: &[u8]| ModelInput {
        sequence: String::from_utf8(s[start - 1..start - 1 + len].to_vec()).expect("ascii"),
        parent_id: record.id.clone(),
        start: start as i64,
    };
    let probs = model.predict(&[window(seq), window(&mutated)], 2)?;
    let (wt, mt) = (probs[0].at2(site - start, class), probs[1].at2(site - start, class));
    Ok(VariantEffect {
        protein: record.id.clone(),
        variant: mutation.to_string(),
        site,
        ptm_type: model.config.types[class].clone(),
        wt_prob: wt,
        mt_prob: mt,
        diff: mt - wt,
    })
}
