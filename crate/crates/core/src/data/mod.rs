//! Sequence parsing, segmentation, splitting, windowing and sampling.

mod fasta;
mod negatives;
mod segment;
mod split;
pub mod synth;
pub mod tsv;
mod window;

use serde::{Deserialize, Serialize};

pub use fasta::{parse_fasta, write_fasta};
pub use negatives::{build_pair_samples, sample_negatives, NegativeOutcome};
pub use segment::{greedy_segment, segment_corpus, Segment};
pub use split::{
    cluster_split, enzyme_cold_split, substrate_cold_split, warm_split, ClusteringBackend, KmerJaccard, Split,
    SplitAssignment,
};
pub use window::window_peptide;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProteinRecord {
    pub id: String,
    /// Uppercase letters from the 20 standard residues plus `X`.
    pub sequence: String,
}

impl ProteinRecord {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// Residue at a 1-based position.
    pub fn residue(&self, position: usize) -> Option<u8> {
        position
            .checked_sub(1)
            .and_then(|i| self.sequence.as_bytes().get(i).copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PtmAnnotation {
    pub protein_id: String,
    /// 1-based residue position.
    pub position: usize,
    pub residue: u8,
    pub ptm_type: usize,
}

/// A peptide window with its per-residue multi-label targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeptideSample {
    pub parent_id: String,
    /// 1-based start of the window in the parent sequence.
    pub window_start: usize,
    pub sequence: String,
    /// `labels[i][c]` is 1 when residue `i` carries type `c`.
    pub labels: Vec<Vec<u8>>,
    /// Residues eligible for at least one modelled type.
    pub site_mask: Vec<bool>,
    /// 1-based parent positions of the sites this window was cut for.
    pub assigned_sites: Vec<usize>,
}

impl PeptideSample {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().flatten().filter(|&&v| v == 1).count()
    }
}

/// One enzyme–substrate candidate pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub substrate_id: String,
    /// 15 letters, `X`-padded beyond the parent sequence.
    pub substrate_peptide: String,
    /// 1-based position of the centre residue in the parent.
    pub center_position: usize,
    pub enzyme_id: String,
    pub enzyme_sequence: String,
    pub ptm_type: usize,
    pub label: u8,
}
