use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ptm_tensor::rng::{stream, Stream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PairSample, ProteinRecord};
use crate::error::{data_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(data_err(format!("unknown split {other:?}"))),
        }
    }
}

/// Protein-level split assignment, in input order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub entries: Vec<(String, Split)>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    pub fn as_map(&self) -> BTreeMap<&str, Split> {
        self.entries.iter().map(|(i, s)| (i.as_str(), *s)).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|(_, s)| *s == split).count()
    }

    /// `protein_id<TAB>split` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("protein_id\tsplit\n");
        for (id, s) in &self.entries {
            out.push_str(id);
            out.push('\t');
            out.push_str(s.as_str());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("protein_id")) {
                continue;
            }
            let (id, s) = line
                .split_once('\t')
                .ok_or_else(|| data_err(format!("split line {}: expected two columns", n + 1)))?;
            entries.push((id.to_string(), s.parse()?));
        }
        Ok(Self { entries })
    }
}

/// Groups sequences into similarity clusters.
pub trait ClusteringBackend {
    /// Cluster label per record; records sharing a label must share a split.
    fn cluster(&self, records: &[ProteinRecord], threshold: f64) -> Vec<usize>;
}

/// Single-linkage clustering on Jaccard similarity of k-mer sets.
#[derive(Clone, Copy, Debug)]
pub struct KmerJaccard {
    pub k: usize,
}

impl Default for KmerJaccard {
    fn default() -> Self {
        Self { k: 3 }
    }
}

impl KmerJaccard {
    pub fn kmer_set(&self, seq: &str) -> Vec<u64> {
        let bytes = seq.as_bytes();
        if bytes.len() < self.k {
            return Vec::new();
        }
        let mut set: Vec<u64> = bytes
            .windows(self.k)
            .map(|w| w.iter().fold(0u64, |acc, &b| acc * 32 + u64::from(b - b'A')))
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        jaccard(&self.kmer_set(a), &self.kmer_set(b))
    }
}

/// Jaccard index of two sorted, deduplicated sets; two empty sets score 0.
pub fn jaccard(a: &[u64], b: &[u64]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

impl ClusteringBackend for KmerJaccard {
    fn cluster(&self, records: &[ProteinRecord], threshold: f64) -> Vec<usize> {
        let sets: Vec<Vec<u64>> = records.iter().map(|r| self.kmer_set(&r.sequence)).collect();
        let n = records.len();
        let mut parent: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in i + 1..n {
                if jaccard(&sets[i], &sets[j]) >= threshold {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        (0..n).map(|i| find(&mut parent, i)).collect()
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(data_err(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    Ok(())
}

/// Assigns whole groups to splits: largest first (seeded order among equal
/// sizes), each to the split with the largest remaining deficit.
fn assign_groups(group_sizes: &[(usize, usize)], total: usize, ratios: [f64; 3], seed: u64) -> BTreeMap<usize, Split> {
    let mut order: Vec<(usize, usize)> = group_sizes.to_vec();
    order.shuffle(&mut stream(seed, Stream::Shuffle));
    order.sort_by_key(|g| std::cmp::Reverse(g.1));
    let targets: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts = [0usize; 3];
    let mut out = BTreeMap::new();
    for (key, size) in order {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            let deficit = targets[s] - counts[s] as f64;
            if deficit > best_deficit {
                best = s;
                best_deficit = deficit;
            }
        }
        counts[best] += size;
        out.insert(key, Split::ALL[best]);
    }
    out
}

/// Similarity-aware train/valid/test split: records in one cluster never
/// straddle two splits.
pub fn cluster_split(
    records: &[ProteinRecord],
    backend: &dyn ClusteringBackend,
    identity_threshold: f64,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if records.is_empty() {
        return Err(data_err("cluster_split needs at least one record"));
    }
    check_ratios(ratios)?;
    let labels = backend.cluster(records, identity_threshold);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        *sizes.entry(l).or_default() += 1;
    }
    let groups: Vec<(usize, usize)> = sizes.into_iter().collect();
    let assign = assign_groups(&groups, records.len(), ratios, seed);
    Ok(SplitAssignment {
        entries: records
            .iter()
            .zip(&labels)
            .map(|(r, l)| (r.id.clone(), assign[l]))
            .collect(),
    })
}

fn grouped_pair_split(
    pairs: &[PairSample],
    key: impl Fn(usize, &PairSample) -> String,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<Split>> {
    if pairs.is_empty() {
        return Err(data_err("no pairs to split"));
    }
    check_ratios(ratios)?;
    let keys: Vec<String> = pairs.iter().enumerate().map(|(i, p)| key(i, p)).collect();
    let mut ids: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for k in &keys {
        let n = ids.len();
        ids.entry(k.as_str()).or_insert((n, 0)).1 += 1;
    }
    let groups: Vec<(usize, usize)> = ids.values().copied().collect();
    let assign = assign_groups(&groups, pairs.len(), ratios, seed);
    Ok(keys.iter().map(|k| assign[&ids[k.as_str()].0]).collect())
}

/// Pair-level random split; substrates and enzymes may recur across splits.
pub fn warm_split(pairs: &[PairSample], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    grouped_pair_split(pairs, |i, _| i.to_string(), ratios, seed)
}

/// Substrate cold start: a substrate protein's pairs all share one split.
pub fn substrate_cold_split(pairs: &[PairSample], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    grouped_pair_split(pairs, |_, p| p.substrate_id.clone(), ratios, seed)
}

/// Enzyme cold start: an enzyme's pairs all share one split.
pub fn enzyme_cold_split(pairs: &[PairSample], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    grouped_pair_split(pairs, |_, p| p.enzyme_id.clone(), ratios, seed)
}
