use proptest::prelude::*;
use ptm_core::crosstalk::{
    attention_weights, build_cooccurrence, npmi_matrix, project_prior, prompt_bias, prompted_attention,
    CooccurrenceCounts, PromptParams,
};
use ptm_core::data::PtmAnnotation;
use ptm_core::tensor::{grad_check_params, Coverage, Graph, Mode, ParamStore, Tape, Tensor, TensorError};

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn labels(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("t{i}")).collect()
}

fn ann(id: &str, pos: usize, t: usize) -> PtmAnnotation {
    PtmAnnotation {
        protein_id: id.into(),
        position: pos,
        residue: b'K',
        ptm_type: t,
    }
}

/// Plain triple-loop product used as the reference for the projection.
fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

#[test]
fn duplicate_annotations_collapse_to_one_site() {
    let anns = vec![ann("p", 3, 0), ann("p", 3, 0), ann("p", 3, 1)];
    let c = build_cooccurrence(&anns, 2).unwrap();
    assert_eq!(c.total_sites, 1);
    assert_eq!(c.marginal, vec![1, 1]);
    assert_eq!(c.joint[0][1], 1);
}

#[test]
fn always_cooccurring_types_score_plus_one() {
    // Both types on the same two of four sites.
    let anns = vec![
        ann("p", 1, 0),
        ann("p", 1, 1),
        ann("p", 2, 0),
        ann("p", 2, 1),
        ann("p", 3, 2),
        ann("p", 4, 2),
    ];
    let m = npmi_matrix(&build_cooccurrence(&anns, 3).unwrap(), labels(3)).unwrap();
    assert_eq!(m.npmi[0][1], 1.0);
    assert_eq!(m.npmi[1][0], 1.0);
}

#[test]
fn independent_types_score_zero() {
    // p(a) = p(b) = 1/2 and p(a,b) = 1/4 over four sites.
    let anns = vec![
        ann("p", 1, 0),
        ann("p", 1, 1),
        ann("p", 2, 0),
        ann("p", 3, 1),
        ann("p", 4, 2),
    ];
    let m = npmi_matrix(&build_cooccurrence(&anns, 3).unwrap(), labels(3)).unwrap();
    assert_eq!(m.npmi[0][1], 0.0);
}

#[test]
fn mutually_exclusive_types_score_minus_one() {
    let anns = vec![ann("p", 1, 0), ann("p", 2, 1), ann("q", 1, 0)];
    let m = npmi_matrix(&build_cooccurrence(&anns, 2).unwrap(), labels(2)).unwrap();
    assert_eq!(m.npmi[0][1], -1.0);
}

#[test]
fn hand_arithmetic_example() {
    let anns = vec![ann("p", 1, 0), ann("p", 1, 1), ann("p", 2, 0), ann("p", 3, 1)];
    let m = npmi_matrix(&build_cooccurrence(&anns, 2).unwrap(), labels(2)).unwrap();
    let expected = ((1.0f64 / 3.0) / (4.0 / 9.0)).ln() / -(1.0f64 / 3.0).ln();
    assert!((m.npmi[0][1] - expected).abs() < 1e-12);
    assert!((m.npmi[0][1] - -0.2618).abs() < 1e-4);
}

fn arb_counts() -> impl Strategy<Value = CooccurrenceCounts> {
    (2usize..7).prop_flat_map(|c| {
        (
            Just(c),
            prop::collection::vec(0u64..40, c * c),
            prop::collection::vec(0u64..40, c),
            0u64..40,
        )
            .prop_map(|(c, raw_joint, extra_marginal, extra_total)| {
                let mut joint = vec![vec![0u64; c]; c];
                for a in 0..c {
                    for b in (a + 1)..c {
                        joint[a][b] = raw_joint[a * c + b];
                        joint[b][a] = joint[a][b];
                    }
                }
                let marginal: Vec<u64> = (0..c)
                    .map(|a| joint[a].iter().copied().max().unwrap_or(0) + extra_marginal[a])
                    .collect();
                let total = marginal.iter().copied().max().unwrap_or(0) + extra_total + 1;
                CooccurrenceCounts {
                    num_types: c,
                    joint,
                    marginal,
                    total_sites: total,
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn npmi_is_symmetric_zero_diagonal_and_bounded(counts in arb_counts()) {
        let c = counts.num_types;
        let m = npmi_matrix(&counts, labels(c)).unwrap();
        for a in 0..c {
            prop_assert_eq!(m.npmi[a][a], 0.0);
            for b in 0..c {
                prop_assert_eq!(m.npmi[a][b].to_bits(), m.npmi[b][a].to_bits());
                prop_assert!((-1.0..=1.0).contains(&m.npmi[a][b]));
            }
        }
        prop_assert!(m.validate().is_ok());
    }
}

#[test]
fn zero_projection_gives_zero_relationship() {
    let mut tape = Tape::new();
    let p = tape.constant(mat(&[&[0.0, 0.3], &[0.3, 0.0]]));
    let a = tape.leaf(Tensor::zeros([2, 2]), true);
    let b = tape.leaf(Tensor::eye(2), true);
    let r = project_prior(&mut tape, p, a, b).unwrap();
    assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn projection_matches_hand_product_and_swapping_transposes() {
    let p = vec![vec![0.0, 0.4, -0.2], vec![0.4, 0.0, 0.7], vec![-0.2, 0.7, 0.0]];
    let a = vec![vec![0.5, -1.0, 0.2], vec![0.3, 0.8, -0.6], vec![1.1, 0.0, 0.4]];
    let b = vec![vec![-0.3, 0.9, 0.1], vec![0.2, -0.5, 1.0], vec![0.6, 0.7, -0.8]];
    let pt = |t: &Vec<Vec<f64>>| Tensor::from_rows(t).unwrap();
    let expected = naive_matmul(&naive_matmul(&p, &a), &transpose(&naive_matmul(&p, &b)));

    let mut tape = Tape::new();
    let (pv, av, bv) = (tape.constant(pt(&p)), tape.constant(pt(&a)), tape.constant(pt(&b)));
    let r = project_prior(&mut tape, pv, av, bv).unwrap();
    let swapped = project_prior(&mut tape, pv, bv, av).unwrap();
    let r = rows_of(tape.value(r));
    let swapped = rows_of(tape.value(swapped));
    for i in 0..3 {
        for j in 0..3 {
            assert!((r[i][j] - expected[i][j]).abs() < 1e-12);
            assert!((swapped[i][j] - r[j][i]).abs() < 1e-12);
        }
    }
}

fn prompt_store(c: usize, alpha: f64, rate: f64) -> (ParamStore, PromptParams) {
    let mut store = ParamStore::new();
    let params = PromptParams::init(&mut store, "prompt", c, alpha, rate);
    (store, params)
}

fn random_probs(l: usize, c: usize, seed: u64) -> Tensor {
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) + 0.05
    };
    let raw: Vec<f64> = (0..l * c).map(|_| next()).collect();
    let rows: Vec<Vec<f64>> = raw
        .chunks(c)
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn zero_relationship_gives_zero_bias() {
    let (store, params) = prompt_store(3, 0.7, 0.0);
    let mut g = Graph::new(&store, Mode::Eval, 0);
    let p = g.input(random_probs(5, 3, 1));
    let r = g.input(Tensor::zeros([3, 3]));
    let b = prompt_bias(&mut g, p, r, &params, "s").unwrap();
    assert_eq!(g.value(b).shape(), &[5, 5]);
    assert!(g.value(b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_alpha_gives_zero_bias() {
    let (store, params) = prompt_store(3, 0.0, 0.1);
    for mode in [Mode::Eval, Mode::Train] {
        let mut g = Graph::new(&store, mode, 3);
        let p = g.input(random_probs(4, 3, 2));
        let r = g.input(mat(&[&[0.2, -1.0, 0.4], &[0.9, 0.1, -0.3], &[0.5, 0.5, 2.0]]));
        let b = prompt_bias(&mut g, p, r, &params, "s").unwrap();
        assert!(g.value(b).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn one_hot_rows_pick_out_relationship_entries() {
    let alpha = 0.8;
    let (store, params) = prompt_store(3, alpha, 0.1);
    let r_rows = [[0.2, -1.0, 0.4], [0.9, 0.1, -0.3], [0.5, 0.5, 2.0]];
    let types = [2usize, 0, 1, 2];
    let onehot: Vec<Vec<f64>> = types
        .iter()
        .map(|&t| (0..3).map(|c| if c == t { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut g = Graph::new(&store, Mode::Eval, 0);
    let p = g.input(Tensor::from_rows(&onehot).unwrap());
    let r = g.input(Tensor::from_rows(&r_rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
    let b = prompt_bias(&mut g, p, r, &params, "s").unwrap();
    let b = g.value(b);
    for (i, &ti) in types.iter().enumerate() {
        for (j, &tj) in types.iter().enumerate() {
            let expected = alpha * r_rows[ti][tj].tanh();
            assert!((b.at2(i, j) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn bias_is_bounded_by_alpha_over_keep_rate() {
    let (alpha, rate) = (-1.3, 0.25);
    let (store, params) = prompt_store(4, alpha, rate);
    let r = Tensor::from_fn([4, 4], |i| (i as f64 * 1.7).sin() * 5.0);
    for seed in 0..20 {
        for mode in [Mode::Eval, Mode::Train] {
            let mut g = Graph::new(&store, mode, seed);
            let p = g.input(random_probs(6, 4, seed));
            let rv = g.input(r.clone());
            let b = prompt_bias(&mut g, p, rv, &params, "s").unwrap();
            let bound = match mode {
                Mode::Eval => alpha.abs(),
                Mode::Train => alpha.abs() / (1.0 - rate),
            };
            assert!(g.value(b).data().iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }
}

#[test]
fn eval_bias_is_deterministic() {
    let (store, params) = prompt_store(3, 0.4, 0.5);
    let run = |seed| {
        let mut g = Graph::new(&store, Mode::Eval, seed);
        let p = g.input(random_probs(5, 3, 9));
        let r = g.input(Tensor::from_fn([3, 3], |i| i as f64 * 0.3 - 1.0));
        let b = prompt_bias(&mut g, p, r, &params, "s").unwrap();
        g.value(b).clone()
    };
    assert!(run(1).bit_eq(&run(2)));
}

#[test]
fn malformed_probability_rows_are_rejected() {
    let (store, params) = prompt_store(2, 0.1, 0.0);
    let mut g = Graph::new(&store, Mode::Eval, 0);
    let p = g.input(mat(&[&[0.6, 0.6]]));
    let r = g.input(Tensor::eye(2));
    assert!(prompt_bias(&mut g, p, r, &params, "s").is_err());
}

#[test]
fn uniform_attention_averages_values() {
    let v = mat(&[&[1.0, 10.0], &[2.0, -4.0], &[6.0, 0.5]]);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros([3, 2]));
    let k = tape.constant(Tensor::zeros([3, 2]));
    let vv = tape.constant(v);
    let b = tape.constant(Tensor::zeros([3, 3]));
    let o = prompted_attention(&mut tape, q, k, vv, Some(b)).unwrap();
    let o = tape.value(o);
    for i in 0..3 {
        assert!((o.at2(i, 0) - 3.0).abs() < 1e-12);
        assert!((o.at2(i, 1) - 6.5 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn large_bias_entry_selects_one_value_row() {
    let mut bias = Tensor::zeros([3, 3]);
    bias.data_mut()[3 + 2] = 30.0;
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros([3, 2]));
    let k = tape.constant(Tensor::zeros([3, 2]));
    let b = tape.constant(bias);
    let w = attention_weights(&mut tape, q, k, Some(b)).unwrap();
    assert!(tape.value(w).at2(1, 2) > 0.999);
    let expected = 30f64.exp() / (30f64.exp() + 2.0);
    assert!((tape.value(w).at2(1, 2) - expected).abs() < 1e-12);
}

#[test]
fn zero_bias_matches_unbiased_attention_bitwise() {
    let q = Tensor::from_fn([4, 3], |i| (i as f64 * 0.37).sin());
    let k = Tensor::from_fn([4, 3], |i| (i as f64 * 0.91).cos());
    let v = Tensor::from_fn([4, 3], |i| i as f64 * 0.1 - 0.5);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let b = tape.constant(Tensor::zeros([4, 4]));
    let with = prompted_attention(&mut tape, qv, kv, vv, Some(b)).unwrap();
    let without = prompted_attention(&mut tape, qv, kv, vv, None).unwrap();
    assert!(tape.value(with).bit_eq(tape.value(without)));
}

proptest! {
    #[test]
    fn attention_rows_sum_to_one(
        l in 1usize..6,
        d in 1usize..5,
        vals in prop::collection::vec(-3.0f64..3.0, 70),
    ) {
        let q = Tensor::from_fn([l, d], |i| vals[i % 70]);
        let k = Tensor::from_fn([l, d], |i| vals[(i + 17) % 70]);
        let b = Tensor::from_fn([l, l], |i| vals[(i + 33) % 70] * 4.0);
        let mut tape = Tape::new();
        let (qv, kv, bv) = (tape.constant(q), tape.constant(k), tape.constant(b));
        let w = attention_weights(&mut tape, qv, kv, Some(bv)).unwrap();
        for row in tape.value(w).data().chunks(l) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

fn tensor_err(e: ptm_core::Error) -> TensorError {
    match e {
        ptm_core::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn attention_and_bias_gradients_pass_finite_differences() {
    let (mut store, params) = prompt_store(2, 0.6, 0.3);
    let q = store.add("q", Tensor::from_fn([3, 2], |i| (i as f64 * 0.7).sin()), true);
    let k = store.add("k", Tensor::from_fn([3, 2], |i| (i as f64 * 1.3).cos()), true);
    let v = store.add("v", Tensor::from_fn([3, 2], |i| i as f64 * 0.2 - 0.4), true);
    let r = store.add("r", mat(&[&[0.3, -0.8], &[0.5, 1.1]]), true);
    let probs = random_probs(3, 2, 4);
    let check = grad_check_params(
        &store,
        |g| {
            let p = g.input(probs.clone());
            let (q, k, v, r) = (g.param(q), g.param(k), g.param(v), g.param(r));
            let b = prompt_bias(g, p, r, &params, "s").map_err(tensor_err)?;
            let o = prompted_attention(&mut g.tape, q, k, v, Some(b)).map_err(tensor_err)?;
            let o2 = g.tape.mul(o, o)?;
            g.tape.sum(o2)
        },
        1e-5,
        Coverage::All,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-5, "{check:?}");
}
