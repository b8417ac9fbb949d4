//! Tab-separated file formats. Lines starting with `#` are comments and a
//! header line naming the first column is skipped.

use std::fmt::Write as _;

use super::synth::EnzymeSite;
use super::{PairSample, PtmAnnotation};
use crate::error::{data_err, Result};
use crate::residues::Eligibility;

fn rows<'a>(
    text: &'a str,
    first_col: &'a str,
    ncols: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines().enumerate().filter_map(move |(n, line)| {
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            return None;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0] == first_col {
            return None;
        }
        if cols.len() < ncols {
            return Some(Err(data_err(format!(
                "line {}: expected {ncols} tab-separated columns, found {}",
                n + 1,
                cols.len()
            ))));
        }
        Some(Ok((n + 1, cols)))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| data_err(format!("line {line}: bad {what} {s:?}")))
}

/// Accepts a class name from the table or a numeric index.
pub fn parse_ptm_type(s: &str, eligibility: &Eligibility, line: usize) -> Result<usize> {
    let t = match eligibility.index_of(s.trim()) {
        Some(i) => i,
        None => parse_num(s, line, "ptm_type")?,
    };
    if t >= eligibility.num_types() {
        return Err(data_err(format!("line {line}: PTM type {t} out of range")));
    }
    Ok(t)
}

/// `protein_id, position, residue, ptm_type, source`.
pub fn read_annotations(text: &str, eligibility: &Eligibility) -> Result<Vec<PtmAnnotation>> {
    rows(text, "protein_id", 4)
        .map(|r| {
            let (n, c) = r?;
            let residue = c[2].trim().as_bytes();
            if residue.len() != 1 {
                return Err(data_err(format!("line {n}: residue must be one letter")));
            }
            Ok(PtmAnnotation {
                protein_id: c[0].to_string(),
                position: parse_num(c[1], n, "position")?,
                residue: residue[0].to_ascii_uppercase(),
                ptm_type: parse_ptm_type(c[3], eligibility, n)?,
            })
        })
        .collect()
}

pub fn write_annotations(anns: &[PtmAnnotation], eligibility: &Eligibility, source: &str) -> String {
    let mut out = String::from("protein_id\tposition\tresidue\tptm_type\tsource\n");
    for a in anns {
        let name = eligibility
            .types
            .get(a.ptm_type)
            .map_or_else(|| a.ptm_type.to_string(), |t| t.name.clone());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            a.protein_id, a.position, a.residue as char, name, source
        );
    }
    out
}

/// One scored (protein, position, type) prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SitePrediction {
    pub protein_id: String,
    pub position: usize,
    pub ptm_type: usize,
    pub score: f64,
}

/// `protein_id, position, ptm_type, score`.
pub fn read_predictions(text: &str, eligibility: &Eligibility) -> Result<Vec<SitePrediction>> {
    rows(text, "protein_id", 4)
        .map(|r| {
            let (n, c) = r?;
            Ok(SitePrediction {
                protein_id: c[0].to_string(),
                position: parse_num(c[1], n, "position")?,
                ptm_type: parse_ptm_type(c[2], eligibility, n)?,
                score: parse_num(c[3], n, "score")?,
            })
        })
        .collect()
}

pub fn write_predictions(preds: &[SitePrediction], eligibility: &Eligibility) -> String {
    let mut out = String::from("protein_id\tposition\tptm_type\tscore\n");
    for p in preds {
        let name = &eligibility.types[p.ptm_type].name;
        let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", p.protein_id, p.position, name, p.score);
    }
    out
}

/// Ground truth for site evaluation: `protein_id, position, ptm_type, label`.
pub fn read_site_labels(text: &str, eligibility: &Eligibility) -> Result<Vec<(String, usize, usize, u8)>> {
    rows(text, "protein_id", 4)
        .map(|r| {
            let (n, c) = r?;
            let label: u8 = parse_num(c[3], n, "label")?;
            if label > 1 {
                return Err(data_err(format!("line {n}: label must be 0 or 1")));
            }
            Ok((
                c[0].to_string(),
                parse_num(c[1], n, "position")?,
                parse_ptm_type(c[2], eligibility, n)?,
                label,
            ))
        })
        .collect()
}

/// One row of a rankings file.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingRow {
    pub query_id: String,
    pub candidate_id: String,
    pub score: f64,
    pub relevant: bool,
}

/// `query_id, candidate_id, score, relevance`.
pub fn read_rankings(text: &str) -> Result<Vec<RankingRow>> {
    rows(text, "query_id", 4)
        .map(|r| {
            let (n, c) = r?;
            let rel: u8 = parse_num(c[3], n, "relevance")?;
            Ok(RankingRow {
                query_id: c[0].to_string(),
                candidate_id: c[1].to_string(),
                score: parse_num(c[2], n, "score")?,
                relevant: rel > 0,
            })
        })
        .collect()
}

/// `substrate_id, position, enzyme_id, ptm_type`.
pub fn write_enzyme_sites(sites: &[EnzymeSite], eligibility: &Eligibility) -> String {
    let mut out = String::from("substrate_id\tposition\tenzyme_id\tptm_type\n");
    for s in sites {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            s.substrate_id, s.position, s.enzyme_id, eligibility.types[s.ptm_type].name
        );
    }
    out
}

pub fn read_enzyme_sites(text: &str, eligibility: &Eligibility) -> Result<Vec<EnzymeSite>> {
    rows(text, "substrate_id", 4)
        .map(|r| {
            let (n, c) = r?;
            Ok(EnzymeSite {
                substrate_id: c[0].to_string(),
                position: parse_num(c[1], n, "position")?,
                enzyme_id: c[2].to_string(),
                ptm_type: parse_ptm_type(c[3], eligibility, n)?,
            })
        })
        .collect()
}

/// `substrate_id, center_position, substrate_peptide, enzyme_id, ptm_type, label`;
/// enzyme sequences are resolved from `enzyme_lookup`.
pub fn write_pairs(pairs: &[PairSample]) -> String {
    let mut out = String::from("substrate_id\tcenter_position\tsubstrate_peptide\tenzyme_id\tptm_type\tlabel\n");
    for p in pairs {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            p.substrate_id, p.center_position, p.substrate_peptide, p.enzyme_id, p.ptm_type, p.label
        );
    }
    out
}

pub fn read_pairs(text: &str, enzyme_lookup: &dyn Fn(&str) -> Option<String>) -> Result<Vec<PairSample>> {
    rows(text, "substrate_id", 6)
        .map(|r| {
            let (n, c) = r?;
            let enzyme_sequence =
                enzyme_lookup(c[3]).ok_or_else(|| data_err(format!("line {n}: unknown enzyme {}", c[3])))?;
            Ok(PairSample {
                substrate_id: c[0].to_string(),
                center_position: parse_num(c[1], n, "center_position")?,
                substrate_peptide: c[2].to_string(),
                enzyme_id: c[3].to_string(),
                enzyme_sequence,
                ptm_type: parse_num(c[4], n, "ptm_type")?,
                label: parse_num(c[5], n, "label")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotations_accept_names_and_indices() {
        let e = Eligibility::bundled();
        let text = "# comment\nprotein_id\tposition\tresidue\tptm_type\tsource\np1\t3\ts\tphosphorylation\tdbptm\np1\t5\tK\t1\tdbptm\n";
        let anns = read_annotations(text, &e).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].residue, b'S');
        assert_eq!(anns[1].ptm_type, 1);
        let again = read_annotations(&write_annotations(&anns, &e, "x"), &e).unwrap();
        assert_eq!(again, anns);
    }

    #[test]
    fn malformed_rows() {
        let e = Eligibility::bundled();
        assert!(read_annotations("p1\tthree\tS\t0\tx\n", &e).is_err());
        assert!(read_annotations("p1\t3\tS\n", &e).is_err());
        assert!(read_annotations("p1\t3\tS\t99\tx\n", &e).is_err());
    }
}
