use std::collections::BTreeMap;

use proptest::prelude::*;
use ptm_core::crosstalk::{build_cooccurrence, npmi_matrix};
use ptm_core::data::synth::{generate_synthetic_corpus, CooccurrenceSpec, SynthSpec};
use ptm_core::data::{
    cluster_split, greedy_segment, parse_fasta, sample_negatives, segment_corpus, window_peptide, KmerJaccard,
    ProteinRecord, Split,
};
use ptm_core::tensor::rng::{stream, Stream};
use rand::Rng;

#[test]
fn fasta_examples() {
    let r = parse_fasta(">p1\nMKT").unwrap();
    assert_eq!((r[0].id.as_str(), r[0].sequence.as_str()), ("p1", "MKT"));
    let r = parse_fasta(">p1 desc\nMK\nTA").unwrap();
    assert_eq!((r[0].id.as_str(), r[0].sequence.as_str()), ("p1", "MKTA"));
    assert!(parse_fasta(">p1\nMK7").is_err());
    assert!(parse_fasta(">p1\nMK\n>p1\nAA").is_err());
    assert_eq!(parse_fasta(">p1\nmkt").unwrap()[0].sequence, "MKT");
}

#[test]
fn segmentation_examples() {
    let w = greedy_segment(120, &[10, 60, 110], 50).unwrap();
    let spans: Vec<(usize, usize)> = w.iter().map(|s| (s.start, s.end)).collect();
    assert_eq!(spans, vec![(1, 50), (36, 85), (71, 120)]);

    let w = greedy_segment(30, &[3, 17, 29], 50).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!((w[0].start, w[0].end), (1, 30));

    let w = greedy_segment(200, &[5, 6, 7], 50).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].sites, vec![5, 6, 7]);

    assert!(greedy_segment(20, &[21], 50).is_err());
}

proptest! {
    #[test]
    fn every_site_is_covered_exactly_once(
        len in 1usize..400,
        raw in prop::collection::vec(any::<prop::sample::Index>(), 1..40),
        max_len in 1usize..80,
    ) {
        let sites: Vec<usize> = raw.iter().map(|i| i.index(len) + 1).collect();
        let windows = greedy_segment(len, &sites, max_len).unwrap();
        let mut seen = BTreeMap::new();
        for w in &windows {
            prop_assert!(w.len() <= max_len && w.len() == max_len.min(len));
            prop_assert!(w.start >= 1 && w.end <= len);
            prop_assert!(!w.sites.is_empty());
            for &s in &w.sites {
                prop_assert!(w.start <= s && s <= w.end);
                *seen.entry(s).or_insert(0) += 1;
            }
        }
        let mut unique = sites.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(seen.keys().copied().collect::<Vec<_>>(), unique);
        prop_assert!(seen.values().all(|&c| c == 1));
    }
}

fn random_seq(rng: &mut impl Rng, len: usize) -> String {
    let aa = b"ACDEFGHIKLMNPQRSTVWY";
    (0..len).map(|_| aa[rng.random_range(0..20)] as char).collect()
}

#[test]
fn identical_sequences_share_a_split() {
    let mut rng = stream(1, Stream::Sub(8, 1));
    let dup = random_seq(&mut rng, 80);
    for seed in 0..10 {
        let mut records: Vec<ProteinRecord> = (0..20)
            .map(|i| ProteinRecord {
                id: format!("r{i}"),
                sequence: random_seq(&mut rng, 80),
            })
            .collect();
        records.push(ProteinRecord {
            id: "a".into(),
            sequence: dup.clone(),
        });
        records.push(ProteinRecord {
            id: "b".into(),
            sequence: dup.clone(),
        });
        let split = cluster_split(&records, &KmerJaccard::default(), 0.4, [0.8, 0.1, 0.1], seed).unwrap();
        assert_eq!(split.get("a"), split.get("b"));
    }
}

#[test]
fn dissimilar_sequences_fill_the_ratios() {
    let mut rng = stream(2, Stream::Sub(8, 2));
    let records: Vec<ProteinRecord> = (0..100)
        .map(|i| ProteinRecord {
            id: format!("r{i}"),
            sequence: random_seq(&mut rng, 60),
        })
        .collect();
    let split = cluster_split(&records, &KmerJaccard::default(), 0.4, [0.8, 0.1, 0.1], 3).unwrap();
    for (s, want) in [(Split::Train, 80i64), (Split::Valid, 10), (Split::Test, 10)] {
        assert!((split.count(s) as i64 - want).abs() <= 2, "{s:?} {}", split.count(s));
    }
    let singletons = cluster_split(&records, &KmerJaccard::default(), 1.01, [0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!(singletons.entries.len(), 100);
    assert!(cluster_split(&[], &KmerJaccard::default(), 0.4, [0.8, 0.1, 0.1], 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn similar_records_never_straddle_splits(seed in any::<u64>(), n in 2usize..40) {
        // Families of point-mutated copies give a mix of similar and
        // dissimilar pairs.
        let mut rng = stream(seed, Stream::Sub(8, 3));
        let mut records: Vec<ProteinRecord> = Vec::new();
        for i in 0..n {
            let seq = if i > 0 && rng.random_bool(0.5) {
                let mut s = records[rng.random_range(0..i)].sequence.clone().into_bytes();
                let k = rng.random_range(0..s.len());
                s[k] = b'W';
                String::from_utf8(s).unwrap()
            } else {
                random_seq(&mut rng, 40)
            };
            records.push(ProteinRecord { id: format!("r{i}"), sequence: seq });
        }
        let backend = KmerJaccard::default();
        let split = cluster_split(&records, &backend, 0.4, [0.8, 0.1, 0.1], seed).unwrap();
        prop_assert_eq!(split.entries.len(), n);
        for a in &records {
            prop_assert!(split.get(&a.id).is_some());
            for b in &records {
                if backend.similarity(&a.sequence, &b.sequence) >= 0.4 {
                    prop_assert_eq!(split.get(&a.id), split.get(&b.id));
                }
            }
        }
    }
}

#[test]
fn window_examples() {
    assert_eq!(
        window_peptide("MKTAYIAKQRQISFVKSHFS", 1, 15).unwrap(),
        "XXXXXXXMKTAYIAK"
    );
    assert_eq!(window_peptide("ABCDEFGHIJKLMNOP", 8, 15).unwrap(), "ABCDEFGHIJKLMNO");
    assert_eq!(window_peptide("MKT", 2, 1).unwrap(), "K");
    assert!(window_peptide("MKT", 4, 15).is_err());
    assert!(window_peptide("MKT", 2, 14).is_err());
}

proptest! {
    #[test]
    fn window_centre_is_the_site(seq in "[ACDEFGHIKLMNPQRSTVWY]{1,60}", idx in any::<prop::sample::Index>(), half in 0usize..10) {
        let pos = idx.index(seq.len()) + 1;
        let w = window_peptide(&seq, pos, 2 * half + 1).unwrap();
        prop_assert_eq!(w.len(), 2 * half + 1);
        prop_assert_eq!(w.as_bytes()[half], seq.as_bytes()[pos - 1]);
    }
}

#[test]
fn negative_examples() {
    let mut rng = stream(0, Stream::Sampling);
    let o = sample_negatives("AKSKA", 2, &[2], &mut rng).unwrap();
    assert_eq!(o.negatives, vec![4]);
    let o = sample_negatives("AKSTA", 2, &[2], &mut rng).unwrap();
    assert!(o.negatives.is_empty());
    let o = sample_negatives("AKSKA", 2, &[2, 4], &mut rng).unwrap();
    assert!(o.negatives.is_empty());
}

proptest! {
    #[test]
    fn at_most_one_negative_and_one_when_possible(
        pep in "[KST]{2,20}",
        idx in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let pos = idx.index(pep.len()) + 1;
        let o = sample_negatives(&pep, pos, &[pos], &mut stream(seed, Stream::Sampling)).unwrap();
        prop_assert!(o.negatives.len() <= 1);
        prop_assert_eq!(o.negatives.len(), usize::from(o.candidates > 0));
        for &n in &o.negatives {
            prop_assert!(n != pos);
            prop_assert_eq!(pep.as_bytes()[n - 1], pep.as_bytes()[pos - 1]);
        }
    }
}

fn single_motif_spec() -> SynthSpec {
    let mut spec = SynthSpec::desk(150, 40, 80);
    spec.motifs.retain(|m| m.pattern == "R-R-x-S");
    spec
}

#[test]
fn planted_motif_sites_carry_the_motif() {
    let corpus = generate_synthetic_corpus(&single_motif_spec(), 5).unwrap();
    assert!(!corpus.annotations.is_empty());
    let seqs: BTreeMap<&str, &[u8]> = corpus
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.sequence.as_bytes()))
        .collect();
    for a in &corpus.annotations {
        let s = seqs[a.protein_id.as_str()];
        assert_eq!(s[a.position - 1], b'S');
        assert_eq!(s[a.position - 4], b'R');
        assert_eq!(s[a.position - 3], b'R');
    }
}

#[test]
fn certain_cooccurrence_gives_unit_npmi() {
    let mut spec = SynthSpec::desk(200, 40, 80);
    spec.types = vec!["phosphorylation".into(), "acetylation".into(), "ubiquitylation".into()];
    spec.motifs
        .retain(|m| m.ptm_type == "phosphorylation" || m.ptm_type == "acetylation");
    spec.cooccurrence = vec![CooccurrenceSpec {
        a: "acetylation".into(),
        b: "ubiquitylation".into(),
        rate: 1.0,
    }];
    let corpus = generate_synthetic_corpus(&spec, 9).unwrap();
    let e = &corpus.eligibility;
    let m = npmi_matrix(
        &build_cooccurrence(&corpus.annotations, e.num_types()).unwrap(),
        e.names(),
    )
    .unwrap();
    let (a, b) = (
        e.index_of("acetylation").unwrap(),
        e.index_of("ubiquitylation").unwrap(),
    );
    assert_eq!(m.npmi[a][b], 1.0);
}

#[test]
fn corpus_is_reproducible_per_seed() {
    let spec = SynthSpec::desk(60, 30, 50);
    let a = generate_synthetic_corpus(&spec, 11).unwrap();
    let b = generate_synthetic_corpus(&spec, 11).unwrap();
    let c = generate_synthetic_corpus(&spec, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.records, c.records);
}

#[test]
fn oversized_motif_is_unsatisfiable() {
    let mut spec = SynthSpec::desk(5, 3, 3);
    spec.motifs.retain(|m| m.pattern == "R-R-x-S");
    assert!(generate_synthetic_corpus(&spec, 0).is_err());
}

#[test]
fn labels_respect_residue_eligibility() {
    let corpus = generate_synthetic_corpus(&SynthSpec::desk(200, 30, 60), 13).unwrap();
    let e = &corpus.eligibility;
    let peptides = segment_corpus(&corpus.records, &corpus.annotations, e, 50).unwrap();
    assert!(!peptides.is_empty());
    for p in &peptides {
        assert!(p.num_positive() >= 1);
        assert!(p.sequence.len() <= 50);
        for (i, row) in p.labels.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v == 1 {
                    assert!(e.is_eligible(c, p.sequence.as_bytes()[i]));
                }
            }
        }
    }
}
