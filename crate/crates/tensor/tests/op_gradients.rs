use proptest::prelude::*;
use ptm_tensor::rng::{stream, Stream};
use ptm_tensor::{grad_check, grad_check_multi, Mode, Tape, Tensor, Var};
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Moves every entry at least `gap` away from zero, keeping its sign.
fn off_kink(t: Tensor, gap: f64) -> Tensor {
    t.map(|v| if v.abs() < gap { gap.copysign(v) } else { v })
}

/// A weighted sum keeps the reduced loss sensitive to every output entry.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> ptm_tensor::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = stream(seed, Stream::Sampling);
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Tape, Var) -> ptm_tensor::Result<Var>) {
    let mut rng = stream(17, Stream::Sampling);
    for trial in 0..20 {
        let x = random(&mut rng, &[3, 4], lo, hi);
        let x = if name == "relu" { off_kink(x, 0.05) } else { x };
        let err = grad_check(
            |t, x| {
                let y = op(t, x)?;
                weighted_sum(t, y, trial)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name} trial {trial}: {err}");
    }
}

fn check_binary(name: &str, shapes: [&[usize]; 2], op: impl Fn(&mut Tape, Var, Var) -> ptm_tensor::Result<Var>) {
    let mut rng = stream(23, Stream::Sampling);
    for trial in 0..20 {
        let a = random(&mut rng, shapes[0], -1.5, 1.5);
        let b = random(&mut rng, shapes[1], 0.5, 2.0);
        let err = grad_check_multi(
            |t, xs| {
                let y = op(t, xs[0], xs[1])?;
                weighted_sum(t, y, trial)
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name} trial {trial}: {err}");
    }
}

#[test]
fn unary_ops_pass_grad_check() {
    check_unary("sigmoid", -3.0, 3.0, |t, x| t.sigmoid(x));
    check_unary("tanh", -2.0, 2.0, |t, x| t.tanh(x));
    check_unary("relu", -2.0, 2.0, |t, x| t.relu(x));
    check_unary("softplus", -4.0, 4.0, |t, x| t.softplus(x));
    check_unary("ln", 0.2, 3.0, |t, x| t.ln(x));
    check_unary("powf", 0.2, 2.0, |t, x| t.powf(x, 2.0));
    check_unary("scale", -2.0, 2.0, |t, x| t.scale(x, -1.7));
    check_unary("add_const", -2.0, 2.0, |t, x| t.add_const(x, 0.3));
    check_unary("softmax", -3.0, 3.0, |t, x| t.softmax_lastdim(x));
    check_unary("clamp", 0.1, 0.9, |t, x| t.clamp(x, 1e-12, 1.0));
    check_unary("sum_rows", -2.0, 2.0, |t, x| t.sum_rows(x));
    check_unary("mean_rows_grouped", -2.0, 2.0, |t, x| t.mean_rows_grouped(x, 3));
    check_unary("reshape", -2.0, 2.0, |t, x| t.reshape(x, [2, 6]));
    check_unary("split_heads", -2.0, 2.0, |t, x| t.split_heads(x, 1, 3, 2));
    check_unary("repeat_groups", -2.0, 2.0, |t, x| t.repeat_groups(x, 3));
    check_unary("mean", -2.0, 2.0, |t, x| t.mean(x));
    check_unary("gather_rows", -2.0, 2.0, |t, x| t.gather_rows(x, &[2, 0, 2, 1]));
    check_unary("merge_heads", -2.0, 2.0, |t, x| {
        let r = t.reshape(x, [2, 3, 2])?;
        t.merge_heads(r, 1, 3, 2)
    });
    check_unary("dropout_train", -2.0, 2.0, |t, x| {
        // A fixed stream makes the mask identical across perturbed evaluations.
        let mut rng = stream(5, Stream::Dropout);
        t.dropout(x, 0.3, Mode::Train, &mut rng)
    });
}

#[test]
fn binary_ops_pass_grad_check() {
    check_binary("add", [&[3, 4], &[3, 4]], |t, a, b| t.add(a, b));
    check_binary("sub", [&[3, 4], &[3, 4]], |t, a, b| t.sub(a, b));
    check_binary("mul", [&[3, 4], &[3, 4]], |t, a, b| t.mul(a, b));
    check_binary("div", [&[3, 4], &[3, 4]], |t, a, b| t.div(a, b));
    check_binary("matmul", [&[3, 4], &[4, 2]], |t, a, b| t.matmul(a, b));
    check_binary("matmul_t", [&[3, 4], &[5, 4]], |t, a, b| t.matmul_t(a, b));
    check_binary("bmm", [&[2, 3, 4], &[2, 4, 2]], |t, a, b| t.bmm(a, b, false));
    check_binary("bmm_t", [&[2, 3, 4], &[2, 5, 4]], |t, a, b| t.bmm(a, b, true));
    check_binary("add_bias", [&[3, 4], &[4]], |t, a, b| t.add_bias(a, b));
    check_binary("concat_last", [&[3, 4], &[3, 2]], |t, a, b| t.concat_last(a, b));
    check_binary("mul_scalar", [&[3, 4], &[1]], |t, a, b| t.mul_scalar(a, b));
}

#[test]
fn layer_norm_passes_grad_check() {
    let mut rng = stream(29, Stream::Sampling);
    for trial in 0..20 {
        let xs = [
            random(&mut rng, &[3, 5], -2.0, 2.0),
            random(&mut rng, &[5], 0.5, 1.5),
            random(&mut rng, &[5], -0.5, 0.5),
        ];
        let err = grad_check_multi(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, trial)
            },
            &xs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "layer_norm trial {trial}: {err}");
    }
}

#[test]
fn product_sum_matches_finite_differences() {
    let mut rng = stream(31, Stream::Sampling);
    let a = random(&mut rng, &[3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3, 3], -1.0, 1.0);
    let err = grad_check_multi(
        |t, v| {
            let p = t.mul(v[0], v[1])?;
            t.sum(p)
        },
        &[a, b],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn replaying_a_seeded_tape_is_bitwise_reproducible() {
    let run = || {
        let mut rng = stream(99, Stream::Dropout);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([4, 4], |i| (i as f64).sin()), true);
        let d = tape.dropout(x, 0.4, Mode::Train, &mut rng).unwrap();
        let s = tape.softmax_lastdim(d).unwrap();
        let l = tape.sum(s).unwrap();
        let l2 = tape.mul(s, x).unwrap();
        let l2 = tape.sum(l2).unwrap();
        let total = tape.add(l, l2).unwrap();
        let g = tape.backward(total).unwrap();
        (tape.value(total).clone(), g.wrt(&tape, x))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..6) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new([rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax_lastdim(xv).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
