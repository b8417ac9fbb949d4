//! Synthetic corpora with planted motifs, controllable co-occurrence and
//! motif-specific enzymes.

use std::collections::{BTreeMap, BTreeSet};

use ptm_tensor::rng::{stream, Stream, StreamRng};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ProteinRecord, PtmAnnotation};
use crate::error::{data_err, Result};
use crate::residues::{Eligibility, AMINO_ACIDS};

/// A curated enzyme → substrate-site relation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnzymeSite {
    pub substrate_id: String,
    pub position: usize,
    pub enzyme_id: String,
    pub ptm_type: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    /// PTM class name from the eligibility table.
    pub ptm_type: String,
    /// Hyphen-separated tokens: a residue letter, `x` for any residue, or a
    /// bracketed set such as `[ST]`. Example: `R-R-x-S`.
    pub pattern: String,
    /// 0-based token index of the modified residue; defaults to the last token.
    #[serde(default)]
    pub site: Option<usize>,
    /// Enzyme recognizing this motif, if any.
    #[serde(default)]
    pub enzyme: Option<String>,
    /// Expected planted copies per 100 residues.
    #[serde(default = "default_rate")]
    pub rate: f64,
}

fn default_rate() -> f64 {
    1.0
}

/// Adds type `b` at sites of type `a` with probability `rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceSpec {
    pub a: String,
    pub b: String,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub types: Vec<String>,
    pub motifs: Vec<MotifSpec>,
    #[serde(default)]
    pub cooccurrence: Vec<CooccurrenceSpec>,
    pub num_proteins: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_enzyme_len")]
    pub enzyme_len: usize,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_enzyme_len() -> usize {
    300
}

fn default_prefix() -> String {
    "SYN".into()
}

impl SynthSpec {
    /// Four-class planted-motif corpus used by the desk experiments.
    pub fn desk(num_proteins: usize, min_len: usize, max_len: usize) -> Self {
        let m = |t: &str, p: &str, site: Option<usize>, enzyme: Option<&str>| MotifSpec {
            ptm_type: t.into(),
            pattern: p.into(),
            site,
            enzyme: enzyme.map(String::from),
            rate: 0.8,
        };
        Self {
            types: vec![
                "phosphorylation".into(),
                "acetylation".into(),
                "methylation".into(),
                "n_linked_glycosylation".into(),
            ],
            motifs: vec![
                m("phosphorylation", "R-R-x-S", None, Some("KIN_BASO")),
                m("phosphorylation", "S-P-x-[KR]", Some(0), Some("KIN_PRO")),
                m("acetylation", "G-K-x-[DE]", Some(1), Some("KAT_1")),
                m("methylation", "R-G-G", Some(0), Some("PRMT_1")),
                m("n_linked_glycosylation", "N-x-[ST]", Some(0), Some("OST_1")),
            ],
            cooccurrence: vec![],
            num_proteins,
            min_len,
            max_len,
            enzyme_len: 300,
            id_prefix: "SYN".into(),
        }
    }
}

/// Generated records with their annotations and enzyme relations.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub eligibility: Eligibility,
    pub records: Vec<ProteinRecord>,
    pub annotations: Vec<PtmAnnotation>,
    pub enzymes: Vec<ProteinRecord>,
    pub enzyme_sites: Vec<EnzymeSite>,
}

#[derive(Clone, Debug)]
enum Token {
    Any,
    Set(Vec<u8>),
}

impl Token {
    fn matches(&self, b: u8) -> bool {
        match self {
            Token::Any => b != b'X',
            Token::Set(s) => s.contains(&b),
        }
    }

    fn draw(&self, rng: &mut StreamRng) -> u8 {
        match self {
            Token::Any => AMINO_ACIDS[rng.random_range(0..20)],
            Token::Set(s) => s[rng.random_range(0..s.len())],
        }
    }
}

/// A parsed motif ready for scanning and planting.
#[derive(Clone, Debug)]
pub struct Motif {
    tokens: Vec<Token>,
    pub site: usize,
    pub ptm_type: usize,
    pub enzyme: Option<String>,
    pub rate: f64,
}

impl Motif {
    pub fn parse(spec: &MotifSpec, eligibility: &Eligibility) -> Result<Self> {
        let ptm_type = eligibility
            .index_of(&spec.ptm_type)
            .ok_or_else(|| data_err(format!("motif type {} not among corpus types", spec.ptm_type)))?;
        let tokens = spec
            .pattern
            .split('-')
            .map(|t| {
                let t = t.trim();
                if t == "x" {
                    return Ok(Token::Any);
                }
                let inner = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')).unwrap_or(t);
                let set: Vec<u8> = inner.bytes().collect();
                if set.is_empty() || set.iter().any(|b| !AMINO_ACIDS.contains(b)) || (set.len() > 1 && inner == t) {
                    return Err(data_err(format!("bad motif token {t:?} in {}", spec.pattern)));
                }
                Ok(Token::Set(set))
            })
            .collect::<Result<Vec<_>>>()?;
        let site = spec.site.unwrap_or(tokens.len() - 1);
        if site >= tokens.len() {
            return Err(data_err(format!("motif site {site} beyond pattern {}", spec.pattern)));
        }
        match &tokens[site] {
            Token::Set(s) if s.iter().all(|&r| eligibility.is_eligible(ptm_type, r)) => {}
            _ => {
                return Err(data_err(format!(
                    "motif {} site residue is not eligible for {}",
                    spec.pattern, spec.ptm_type
                )))
            }
        }
        Ok(Self {
            tokens,
            site,
            ptm_type,
            enzyme: spec.enzyme.clone(),
            rate: spec.rate,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whether the motif occurs with its site at 0-based `i` of `seq`.
    pub fn matches_at(&self, seq: &[u8], i: usize) -> bool {
        let Some(start) = i.checked_sub(self.site) else {
            return false;
        };
        start + self.tokens.len() <= seq.len() && self.tokens.iter().enumerate().all(|(k, t)| t.matches(seq[start + k]))
    }

    fn plant(&self, seq: &mut [u8], start: usize, rng: &mut StreamRng) {
        for (k, t) in self.tokens.iter().enumerate() {
            if let Token::Set(_) = t {
                seq[start + k] = t.draw(rng);
            }
        }
    }
}

/// Scans `seq` for every motif; returns (0-based index, motif index).
pub fn scan_motifs(seq: &[u8], motifs: &[Motif]) -> Vec<(usize, usize)> {
    let mut hits = Vec::new();
    for i in 0..seq.len() {
        for (m, motif) in motifs.iter().enumerate() {
            if motif.matches_at(seq, i) {
                hits.push((i, m));
            }
        }
    }
    hits
}

/// Generates a reproducible corpus from `spec`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus> {
    let names: Vec<&str> = spec.types.iter().map(String::as_str).collect();
    let eligibility = Eligibility::select(&names)?;
    let motifs: Vec<Motif> = spec
        .motifs
        .iter()
        .map(|m| Motif::parse(m, &eligibility))
        .collect::<Result<_>>()?;
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(data_err("synthetic length range is empty"));
    }
    if let Some(m) = motifs.iter().find(|m| m.len() > spec.min_len) {
        return Err(data_err(format!(
            "motif of length {} cannot fit in sequences of length {}",
            m.len(),
            spec.min_len
        )));
    }
    let co: Vec<(usize, usize, f64)> = spec
        .cooccurrence
        .iter()
        .map(|c| {
            let a = eligibility
                .index_of(&c.a)
                .ok_or_else(|| data_err(format!("unknown type {}", c.a)))?;
            let b = eligibility
                .index_of(&c.b)
                .ok_or_else(|| data_err(format!("unknown type {}", c.b)))?;
            Ok((a, b, c.rate))
        })
        .collect::<Result<_>>()?;

    let mut rng = stream(seed, Stream::Synthesis);
    let mut records = Vec::with_capacity(spec.num_proteins);
    let mut annotations = BTreeSet::new();
    let mut enzyme_sites = BTreeSet::new();
    for n in 0..spec.num_proteins {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut seq: Vec<u8> = (0..len).map(|_| AMINO_ACIDS[rng.random_range(0..20)]).collect();
        for m in &motifs {
            let expected = m.rate * len as f64 / 100.0;
            let mut copies = expected.floor() as usize;
            if rng.random::<f64>() < expected.fract() {
                copies += 1;
            }
            for _ in 0..copies {
                let start = rng.random_range(0..=len - m.len());
                m.plant(&mut seq, start, &mut rng);
            }
        }
        let id = format!("{}{:05}", spec.id_prefix, n);
        let mut typed: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (i, mi) in scan_motifs(&seq, &motifs) {
            let m = &motifs[mi];
            typed.entry(i).or_default().insert(m.ptm_type);
            if let Some(e) = &m.enzyme {
                enzyme_sites.insert(EnzymeSite {
                    substrate_id: id.clone(),
                    position: i + 1,
                    enzyme_id: e.clone(),
                    ptm_type: m.ptm_type,
                });
            }
        }
        for (&i, types) in typed.iter_mut() {
            let base: Vec<usize> = types.iter().copied().collect();
            for &(a, b, rate) in &co {
                if base.contains(&a) && eligibility.is_eligible(b, seq[i]) && rng.random::<f64>() < rate {
                    types.insert(b);
                }
            }
        }
        for (i, types) in typed {
            for t in types {
                annotations.insert(PtmAnnotation {
                    protein_id: id.clone(),
                    position: i + 1,
                    residue: seq[i],
                    ptm_type: t,
                });
            }
        }
        records.push(ProteinRecord {
            id,
            sequence: String::from_utf8(seq).expect("ascii"),
        });
    }

    let enzyme_names: BTreeSet<&String> = motifs.iter().filter_map(|m| m.enzyme.as_ref()).collect();
    let enzymes = enzyme_names
        .into_iter()
        .map(|name| {
            // Each enzyme over-represents three signature residues.
            let signature: Vec<u8> = (0..3).map(|_| AMINO_ACIDS[rng.random_range(0..20)]).collect();
            let seq: Vec<u8> = (0..spec.enzyme_len)
                .map(|_| {
                    if rng.random::<f64>() < 0.3 {
                        signature[rng.random_range(0..3)]
                    } else {
                        AMINO_ACIDS[rng.random_range(0..20)]
                    }
                })
                .collect();
            ProteinRecord {
                id: name.clone(),
                sequence: String::from_utf8(seq).expect("ascii"),
            }
        })
        .collect();

    Ok(SyntheticCorpus {
        eligibility,
        records,
        annotations: annotations.into_iter().collect(),
        enzymes,
        enzyme_sites: enzyme_sites.into_iter().collect(),
    })
}
