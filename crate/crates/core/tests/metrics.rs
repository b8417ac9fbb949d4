use proptest::prelude::*;
use ptm_core::data::ProteinRecord;
use ptm_core::gradsuite::{randomize, toy_config, toy_prior_for};
use ptm_core::metrics::{
    auprc, auroc, auroc_trapezoid, confusion_metrics, gradient_times_input, input_gradient_attribution, macro_average,
    mean_average_precision, motif_logo, variant_delta, BinaryCounts, Mutation, RankedItem, RankedList, ScoredPeptide,
    VariantEffect,
};
use ptm_core::models::{ModelInput, MspnModel};
use ptm_core::tensor::rng::{stream, Stream};
use ptm_core::tensor::{Tape, Tensor};
use rand::Rng;

#[test]
fn perfect_classifier_scores_one_everywhere() {
    let m = confusion_metrics(&BinaryCounts::new(1, 1, 0, 0)).unwrap();
    for v in [m.accuracy, m.precision, m.recall, m.f1, m.mcc] {
        assert_eq!(v, 1.0);
    }
}

#[test]
fn hand_derived_confusion_example() {
    let m = confusion_metrics(&BinaryCounts::new(3, 4, 1, 2)).unwrap();
    assert!((m.mcc - 10.0 / 600f64.sqrt()).abs() < 1e-12);
    assert!((m.f1 - 2.0 * (0.75 * 0.6) / 1.35).abs() < 1e-12);
    assert!((m.precision - 0.75).abs() < 1e-12);
    assert!((m.recall - 0.6).abs() < 1e-12);
    assert!((m.accuracy - 0.7).abs() < 1e-12);
    assert!((m.mcc - 0.40825).abs() < 5e-6);
}

#[test]
fn zero_denominators_follow_conventions() {
    let m = confusion_metrics(&BinaryCounts::new(0, 5, 0, 3)).unwrap();
    assert_eq!((m.precision, m.recall, m.f1, m.mcc), (0.0, 0.0, 0.0, 0.0));
    assert!(confusion_metrics(&BinaryCounts::new(0, 0, 0, 0)).is_err());
}

#[test]
fn macro_average_excludes_unsupported_classes() {
    assert_eq!(macro_average(&[0.4, 0.6], &[3, 5]).unwrap().value, 0.5);
    let m = macro_average(&[0.4, 0.6, 0.99], &[3, 5, 0]).unwrap();
    assert_eq!(m.value, 0.5);
    assert_eq!(m.excluded, vec![2]);
    assert_eq!(macro_average(&[0.3], &[1]).unwrap().value, 0.3);
    assert!(macro_average(&[0.3, 0.2], &[0, 0]).is_err());
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
    assert!(auroc(&[0.2, 0.4], &[true, true]).is_err());
}

#[test]
fn auroc_of_unrelated_labels_is_one_half() {
    let mut rng = stream(42, Stream::Sub(9, 1));
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
    assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn auprc_examples() {
    assert_eq!(auprc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(auprc(&[0.3, 0.2, 0.7], &[true, true, true]).unwrap(), 1.0);
    assert!(auprc(&[0.3, 0.2], &[false, false]).is_err());
}

#[test]
fn auprc_of_random_scores_is_the_prevalence() {
    let mut rng = stream(7, Stream::Sub(9, 2));
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 100 == 0).collect();
    assert!((auprc(&scores, &labels).unwrap() - 0.01).abs() < 0.003);
}

fn list(q: &str, rel: &[bool]) -> RankedList {
    let items = rel
        .iter()
        .enumerate()
        .map(|(i, &r)| RankedItem {
            candidate_id: format!("c{i}"),
            score: 1.0 - i as f64 / 10.0,
            relevant: r,
        })
        .collect();
    RankedList::new(q, items)
}

#[test]
fn average_precision_examples() {
    let ap = list("q", &[true, false, true]).average_precision().unwrap();
    assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
    assert!((ap - 0.8333).abs() < 5e-5);
    let map = mean_average_precision(&[list("a", &[true]), list("b", &[false, true])]).unwrap();
    assert_eq!(map, 0.75);
    assert_eq!(list("c", &[true, true, false, false]).average_precision().unwrap(), 1.0);
    assert!(list("d", &[false]).average_precision().is_err());
}

fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| {
            (
                // A coarse grid so ties are common.
                prop::collection::vec((0u32..12).prop_map(|v| v as f64 / 11.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rank_and_trapezoid_auroc_agree((scores, labels) in arb_instance()) {
        let a = auroc(&scores, &labels).unwrap();
        let b = auroc_trapezoid(&scores, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auprc_equals_single_query_map((scores, labels) in arb_instance()) {
        let items = scores
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (&s, &r))| RankedItem { candidate_id: format!("{i:04}"), score: s, relevant: r })
            .collect();
        let map = mean_average_precision(&[RankedList::new("q", items)]).unwrap();
        let ap = auprc(&scores, &labels).unwrap();
        prop_assert_eq!(ap, map);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn monotone_transforms_leave_rankings_unchanged((scores, labels) in arb_instance()) {
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
        prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&moved, &labels).unwrap());
    }

    #[test]
    fn confusion_metrics_stay_in_range(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        prop_assume!(tp + tn + fp + fn_ > 0);
        let m = confusion_metrics(&BinaryCounts::new(tp, tn, fp, fn_)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.mcc));
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn logo_columns_sum_to_one(peps in prop::collection::vec("[ACDEFGHIKLMNPQRSTVWYX]{7}", 1..30)) {
        let preds: Vec<ScoredPeptide> = peps
            .iter()
            .enumerate()
            .map(|(i, p)| ScoredPeptide { id: format!("{i}"), group: "g".into(), peptide: p.clone(), score: 0.9 })
            .collect();
        let logo = motif_logo(&preds, "g", 100, 0.5).unwrap();
        for col in &logo.frequencies {
            let s: f64 = col.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_model_attribution_is_its_weight() {
    // logit = w · x_j over one-hot rows, so only row j is credited, with
    // the weight of the residue present there.
    let (l, j) = (5, 2);
    let letters = [3usize, 7, 11, 0, 19];
    let w: Vec<f64> = (0..20).map(|k| k as f64 * 0.1 - 0.9).collect();
    let x = Tensor::from_fn([l, 20], |i| if letters[i / 20] == i % 20 { 1.0 } else { 0.0 });
    let wmat = Tensor::from_fn([l, 20], |i| if i / 20 == j { w[i % 20] } else { 0.0 });
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let wv = tape.constant(wmat);
    let prod = tape.mul(xv, wv).unwrap();
    let logit = tape.sum(prod).unwrap();
    let attr = gradient_times_input(&tape, logit, xv).unwrap();
    for (i, a) in attr.iter().enumerate() {
        let expected = if i == j { w[letters[j]] } else { 0.0 };
        assert_eq!(*a, expected);
    }
}

fn toy_model(seed: u64) -> MspnModel {
    let config = toy_config(seed);
    let mut rng = stream(seed, Stream::Sub(9, 3));
    let prior = toy_prior_for(&config, &mut rng);
    let mut model = MspnModel::new(&config, prior, None).unwrap();
    randomize(&mut model.store, &mut rng);
    model
}

#[test]
fn zeroed_model_has_zero_attribution() {
    let mut model = toy_model(1);
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).data_mut().fill(0.0);
    }
    let attr = input_gradient_attribution(&model, &ModelInput::new("MRRASPGKSN"), 5, 0).unwrap();
    assert_eq!(attr.len(), 10);
    assert!(attr.iter().all(|&a| a == 0.0));
}

#[test]
fn attribution_is_finite_and_reproducible() {
    let model = toy_model(2);
    let pep = ModelInput::new("MRRASPGKSN");
    let a = input_gradient_attribution(&model, &pep, 5, 0).unwrap();
    let b = input_gradient_attribution(&model, &pep, 5, 0).unwrap();
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, b);
    assert!(a.iter().any(|&v| v != 0.0));
    assert!(input_gradient_attribution(&model, &pep, 11, 0).is_err());
    assert!(input_gradient_attribution(&model, &pep, 5, 9).is_err());
}

fn scored(peps: &[&str]) -> Vec<ScoredPeptide> {
    peps.iter()
        .enumerate()
        .map(|(i, p)| ScoredPeptide {
            id: format!("p{i}"),
            group: "E1".into(),
            peptide: (*p).into(),
            score: 0.9 - i as f64 * 0.01,
        })
        .collect()
}

#[test]
fn logo_counting_examples() {
    let logo = motif_logo(&scored(&["AKS", "AKT"]), "E1", 100, 0.5).unwrap();
    assert_eq!(logo.frequency(0, b'A'), 1.0);
    assert_eq!(logo.frequency(1, b'K'), 1.0);
    assert_eq!(logo.frequency(2, b'S'), 0.5);
    assert_eq!(logo.frequency(2, b'T'), 0.5);

    let single = motif_logo(&scored(&["MKV"]), "E1", 100, 0.5).unwrap();
    for (col, letter) in b"MKV".iter().copied().enumerate() {
        assert_eq!(single.frequency(col, letter), 1.0);
        assert_eq!(single.frequencies[col].iter().sum::<f64>(), 1.0);
    }
    assert!(motif_logo(&scored(&["MKV"]), "E2", 100, 0.5).is_err());
}

#[test]
fn logo_of_planted_motif_recovers_it() {
    let mut rng = stream(3, Stream::Sub(9, 4));
    let aa = b"ACDEFGHIKLMNPQRSTVWY";
    let peps: Vec<String> = (0..100)
        .map(|_| {
            let mut p: Vec<u8> = (0..15).map(|_| aa[rng.random_range(0..20)]).collect();
            p[4] = b'R';
            p[5] = b'R';
            p[7] = b'S';
            String::from_utf8(p).unwrap()
        })
        .collect();
    let refs: Vec<&str> = peps.iter().map(String::as_str).collect();
    let logo = motif_logo(&scored(&refs), "E1", 100, f64::NEG_INFINITY).unwrap();
    assert!(logo.frequency(7 - 3, b'R') > 0.9);
    assert!(logo.frequency(7 - 2, b'R') > 0.9);
    assert_eq!(logo.rows_used, 100);
}

#[test]
fn top_k_keeps_the_highest_scores() {
    let logo = motif_logo(&scored(&["AAA", "CCC", "DDD"]), "E1", 2, 0.5).unwrap();
    assert_eq!(logo.rows_used, 2);
    assert_eq!(logo.frequency(0, b'D'), 0.0);
}

fn record() -> ProteinRecord {
    ProteinRecord {
        id: "P1".into(),
        sequence: "MKRRASPGKSNLLAKQWERTY".into(),
    }
}

#[test]
fn identity_mutation_changes_nothing() {
    let model = toy_model(4);
    let m: Mutation = "R3R".parse().unwrap();
    let e = variant_delta(&model, &record(), &m, 6, 15, 0).unwrap();
    assert_eq!(e.diff, 0.0);
    assert_eq!(e.wt_prob, e.mt_prob);
}

#[test]
fn swapping_wild_type_and_mutant_negates_the_difference() {
    let model = toy_model(5);
    let fwd: Mutation = "R3A".parse().unwrap();
    let a = variant_delta(&model, &record(), &fwd, 6, 15, 0).unwrap();
    let mut mutated = record();
    mutated.sequence.replace_range(2..3, "A");
    let back: Mutation = "A3R".parse().unwrap();
    let b = variant_delta(&model, &mutated, &back, 6, 15, 0).unwrap();
    assert!(a.diff != 0.0);
    assert!((a.diff + b.diff).abs() < 1e-12);
}

#[test]
fn mismatched_reference_is_rejected() {
    let model = toy_model(6);
    let m: Mutation = "K3A".parse().unwrap();
    let err = variant_delta(&model, &record(), &m, 6, 15, 0).unwrap_err();
    assert!(err.to_string().contains("does not match"));
}

#[test]
fn variant_rows_follow_the_table_layout() {
    assert_eq!(
        VariantEffect::TSV_HEADER.split('\t').collect::<Vec<_>>(),
        ["protein", "variant", "site", "ptm_type", "wt_prob", "mt_prob", "diff"]
    );
    let row = VariantEffect {
        protein: "APC".into(),
        variant: "S2621C".into(),
        site: 2621,
        ptm_type: "phosphorylation".into(),
        wt_prob: 0.944,
        mt_prob: 0.0,
        diff: -0.944,
    }
    .to_tsv_row();
    assert_eq!(row, "APC\tS2621C\t2621\tphosphorylation\t0.944000\t0.000000\t-0.944000");
    let m: Mutation = "P616L".parse().unwrap();
    assert_eq!((m.reference, m.position, m.alternate), (b'P', 616, b'L'));
    assert_eq!(m.to_string(), "P616L");
    assert!("616L".parse::<Mutation>().is_err());
}
