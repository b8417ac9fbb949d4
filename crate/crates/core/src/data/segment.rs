use std::collections::{BTreeMap, BTreeSet};

use super::{PeptideSample, ProteinRecord, PtmAnnotation};
use crate::error::{data_err, Result};
use crate::residues::Eligibility;

/// A window cut around a group of sites; coordinates are 1-based inclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Sites assigned to this window. Every input site lands in exactly one.
    pub sites: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

/// Greedy site-grouping segmentation.
///
/// Repeatedly takes the leftmost unassigned site `s`, groups every
/// unassigned site within `s + max_len - 1`, and centres a window of
/// `min(max_len, L)` residues on the group, clamped to the sequence.
pub fn greedy_segment(seq_len: usize, sites: &[usize], max_len: usize) -> Result<Vec<Segment>> {
    if max_len == 0 {
        return Err(data_err("max_len must be positive"));
    }
    if sites.is_empty() {
        return Err(data_err("greedy_segment needs at least one site"));
    }
    let mut sorted: Vec<usize> = sites.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&s| s == 0 || s > seq_len) {
        return Err(data_err(format!("site {bad} outside sequence of length {seq_len}")));
    }
    let width = max_len.min(seq_len);
    let last_start = if seq_len > max_len { seq_len - max_len + 1 } else { 1 };
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i];
        let limit = s + max_len - 1;
        let j = sorted[i..].iter().take_while(|&&x| x <= limit).count() + i;
        let group = sorted[i..j].to_vec();
        let span = group[group.len() - 1] - s + 1;
        let shift = (max_len - span) / 2;
        let start = (s as isize - shift as isize).clamp(1, last_start as isize) as usize;
        out.push(Segment {
            start,
            end: start + width - 1,
            sites: group,
        });
        i = j;
    }
    Ok(out)
}

/// Cuts every annotated protein into labelled peptide samples.
///
/// Proteins without annotations are skipped. A window's label matrix marks
/// every annotation inside it, including sites assigned to a neighbouring
/// window.
pub fn segment_corpus(
    records: &[ProteinRecord],
    annotations: &[PtmAnnotation],
    eligibility: &Eligibility,
    max_len: usize,
) -> Result<Vec<PeptideSample>> {
    let c = eligibility.num_types();
    let mut by_protein: BTreeMap<&str, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for a in annotations {
        if a.ptm_type >= c {
            return Err(data_err(format!("PTM type {} out of range (C = {c})", a.ptm_type)));
        }
        by_protein
            .entry(a.protein_id.as_str())
            .or_default()
            .insert((a.position, a.ptm_type));
    }
    let mut out = Vec::new();
    for rec in records {
        let Some(sites) = by_protein.get(rec.id.as_str()) else {
            continue;
        };
        let seq = rec.sequence.as_bytes();
        for &(pos, t) in sites {
            let res = rec
                .residue(pos)
                .ok_or_else(|| data_err(format!("{}: position {pos} out of range", rec.id)))?;
            if !eligibility.is_eligible(t, res) {
                return Err(data_err(format!(
                    "{}: residue {} at {pos} is not eligible for {}",
                    rec.id, res as char, eligibility.types[t].name
                )));
            }
        }
        let positions: Vec<usize> = sites.iter().map(|&(p, _)| p).collect();
        for seg in greedy_segment(rec.len(), &positions, max_len)? {
            let len = seg.len();
            let mut labels = vec![vec![0u8; c]; len];
            for &(pos, t) in sites.range((seg.start, 0)..=(seg.end, usize::MAX)) {
                labels[pos - seg.start][t] = 1;
            }
            let window = &seq[seg.start - 1..seg.end];
            let site_mask = window
                .iter()
                .map(|&r| (0..c).any(|t| eligibility.is_eligible(t, r)))
                .collect();
            out.push(PeptideSample {
                parent_id: rec.id.clone(),
                window_start: seg.start,
                sequence: String::from_utf8(window.to_vec()).expect("ascii"),
                labels,
                site_mask,
                assigned_sites: seg.sites,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(segs: &[Segment]) -> Vec<(usize, usize)> {
        segs.iter().map(|s| (s.start, s.end)).collect()
    }

    #[test]
    fn three_spread_sites() {
        let segs = greedy_segment(120, &[10, 60, 110], 50).unwrap();
        assert_eq!(spans(&segs), vec![(1, 50), (36, 85), (71, 120)]);
    }

    #[test]
    fn short_sequence_single_window() {
        let segs = greedy_segment(30, &[3, 17, 29], 50).unwrap();
        assert_eq!(spans(&segs), vec![(1, 30)]);
    }

    #[test]
    fn adjacent_sites_grouped() {
        let segs = greedy_segment(200, &[5, 6, 7], 50).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].sites, vec![5, 6, 7]);
        assert!(segs[0].start <= 5 && segs[0].end >= 7);
    }

    #[test]
    fn out_of_range_site() {
        assert!(greedy_segment(10, &[11], 50).is_err());
        assert!(greedy_segment(10, &[0], 50).is_err());
        assert!(greedy_segment(10, &[], 50).is_err());
    }

    #[test]
    fn corpus_labels_and_skip() {
        let recs = vec![
            ProteinRecord {
                id: "a".into(),
                sequence: "MKSAKT".into(),
            },
            ProteinRecord {
                id: "b".into(),
                sequence: "MMMM".into(),
            },
        ];
        let e = Eligibility::bundled();
        let phos = e.index_of("phosphorylation").unwrap();
        let acet = e.index_of("acetylation").unwrap();
        let ann = vec![
            PtmAnnotation {
                protein_id: "a".into(),
                position: 3,
                residue: b'S',
                ptm_type: phos,
            },
            PtmAnnotation {
                protein_id: "a".into(),
                position: 2,
                residue: b'K',
                ptm_type: acet,
            },
        ];
        let peps = segment_corpus(&recs, &ann, &e, 50).unwrap();
        assert_eq!(peps.len(), 1);
        assert_eq!(peps[0].labels[2][phos], 1);
        assert_eq!(peps[0].labels[1][acet], 1);
        assert_eq!(peps[0].num_positive(), 2);
        assert!(!peps[0].site_mask.is_empty());

        let bad = vec![PtmAnnotation {
            protein_id: "a".into(),
            position: 1,
            residue: b'M',
            ptm_type: phos,
        }];
        assert!(segment_corpus(&recs, &bad, &e, 50).is_err());
    }
}
