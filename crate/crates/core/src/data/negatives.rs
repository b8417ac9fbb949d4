use std::collections::{BTreeMap, BTreeSet};

use ptm_tensor::rng::{stream, Stream};
use rand::Rng;

use super::synth::EnzymeSite;
use super::{window_peptide, PairSample, ProteinRecord, PtmAnnotation};
use crate::error::{data_err, Result};

/// Result of drawing a mate for one positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeOutcome {
    /// 1-based peptide positions drawn as negatives (zero or one).
    pub negatives: Vec<usize>,
    pub candidates: usize,
}

/// Draws one unmodified residue of the same letter as the positive.
///
/// `annotated` lists 1-based peptide positions carrying the positive's PTM
/// type; they are never drawn. With no candidate the positive stays unmated.
pub fn sample_negatives<R: Rng + ?Sized>(
    peptide: &str,
    positive: usize,
    annotated: &[usize],
    rng: &mut R,
) -> Result<NegativeOutcome> {
    let seq = peptide.as_bytes();
    if positive == 0 || positive > seq.len() {
        return Err(data_err(format!("positive {positive} outside peptide")));
    }
    let letter = seq[positive - 1];
    let candidates: Vec<usize> = (1..=seq.len())
        .filter(|&p| p != positive && seq[p - 1] == letter && !annotated.contains(&p))
        .collect();
    if candidates.is_empty() {
        log::debug!(
            "no negative candidate for {} at {positive} in {peptide}",
            letter as char
        );
        return Ok(NegativeOutcome {
            negatives: vec![],
            candidates: 0,
        });
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    Ok(NegativeOutcome {
        negatives: vec![pick],
        candidates: candidates.len(),
    })
}

/// Builds balanced enzyme–substrate pairs: each curated site becomes a
/// positive 15-mer, mated with one negative drawn from the surrounding
/// `context_len` residues of the same substrate.
pub fn build_pair_samples(
    substrates: &[ProteinRecord],
    enzymes: &[ProteinRecord],
    sites: &[EnzymeSite],
    annotations: &[PtmAnnotation],
    window_len: usize,
    context_len: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let subs: BTreeMap<&str, &ProteinRecord> = substrates.iter().map(|r| (r.id.as_str(), r)).collect();
    let enz: BTreeMap<&str, &ProteinRecord> = enzymes.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut typed: BTreeMap<(&str, usize), BTreeSet<usize>> = BTreeMap::new();
    for a in annotations {
        typed
            .entry((a.protein_id.as_str(), a.ptm_type))
            .or_default()
            .insert(a.position);
    }
    for s in sites {
        typed
            .entry((s.substrate_id.as_str(), s.ptm_type))
            .or_default()
            .insert(s.position);
    }
    let mut rng = stream(seed, Stream::Sampling);
    let mut unmated = 0usize;
    let mut out = Vec::with_capacity(sites.len() * 2);
    for site in sites {
        let rec = subs
            .get(site.substrate_id.as_str())
            .ok_or_else(|| data_err(format!("unknown substrate {}", site.substrate_id)))?;
        let enzyme = enz
            .get(site.enzyme_id.as_str())
            .ok_or_else(|| data_err(format!("unknown enzyme {}", site.enzyme_id)))?;
        let make = |pos: usize, label: u8| -> Result<PairSample> {
            Ok(PairSample {
                substrate_id: rec.id.clone(),
                substrate_peptide: window_peptide(&rec.sequence, pos, window_len)?,
                center_position: pos,
                enzyme_id: enzyme.id.clone(),
                enzyme_sequence: enzyme.sequence.clone(),
                ptm_type: site.ptm_type,
                label,
            })
        };
        out.push(make(site.position, 1)?);

        let half = context_len / 2;
        let lo = site.position.saturating_sub(half).max(1);
        let hi = (site.position + half).min(rec.len());
        let context = &rec.sequence[lo - 1..hi];
        let annotated: Vec<usize> = typed
            .get(&(rec.id.as_str(), site.ptm_type))
            .map(|set| set.range(lo..=hi).map(|p| p - lo + 1).collect())
            .unwrap_or_default();
        let drawn = sample_negatives(context, site.position - lo + 1, &annotated, &mut rng)?;
        unmated += usize::from(drawn.negatives.is_empty());
        for p in drawn.negatives {
            out.push(make(p + lo - 1, 0)?);
        }
    }
    if unmated > 0 {
        log::warn!("{unmated} of {} positive sites had no negative candidate", sites.len());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn other_lysine_is_drawn() {
        let mut rng = stream(1, Stream::Sampling);
        let o = sample_negatives("AKSKA", 2, &[2], &mut rng).unwrap();
        assert_eq!(o.negatives, vec![4]);
    }

    #[test]
    fn unique_lysine_has_no_mate() {
        let mut rng = stream(1, Stream::Sampling);
        let o = sample_negatives("AKSAA", 2, &[2], &mut rng).unwrap();
        assert!(o.negatives.is_empty());
    }

    #[test]
    fn annotated_lysines_are_excluded() {
        let mut rng = stream(1, Stream::Sampling);
        let o = sample_negatives("AKSKA", 2, &[2, 4], &mut rng).unwrap();
        assert!(o.negatives.is_empty());
    }
}
