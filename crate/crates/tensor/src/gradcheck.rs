//! Central finite-difference checks of tape gradients.
//!
//! The error for one coordinate is `|a − n| / max(1e-8, |a| + |n|)` where
//! `a` is the autodiff gradient and `n` the central difference; checks
//! report the maximum over the probed coordinates.

use crate::error::{Result, TensorError};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Checks `f` at `x` over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// Checks `f` jointly over several inputs.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = xs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Which coordinates of each parameter a parameter check probes.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced coordinates per parameter tensor.
    Sampled(usize),
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub coords_checked: usize,
}

/// Checks the gradient of `f` with respect to every trainable parameter.
///
/// `f` runs in eval mode with a fixed dropout seed, so the function is
/// deterministic across the perturbed evaluations.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64, coverage: Coverage) -> Result<ParamCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, Mode::Eval, 0);
        let out = f(&mut g)?;
        scalar_of(&g.tape, out)
    };

    let mut g = Graph::new(store, Mode::Eval, 0);
    let out = f(&mut g)?;
    scalar_of(&g.tape, out)?;
    let grads = g.backward(out)?;
    let analytic: std::collections::HashMap<ParamId, Tensor> = g.param_grads(&grads).into_iter().collect();

    let mut work = store.clone();
    let mut result = ParamCheck {
        max_rel_err: 0.0,
        worst_param: None,
        coords_checked: 0,
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled(k) if k >= n => (0..n).collect(),
            Coverage::Sampled(k) => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
        };
        for i in coords {
            let orig = p.value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            result.coords_checked += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst_param = Some(p.name.clone());
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_sum_passes() {
        let x = Tensor::from_fn([6], |i| i as f64 * 0.4 - 1.1);
        let err = grad_check(
            |t, x| {
                let s = t.sigmoid(x)?;
                t.sum(s)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_fn([4], |i| i as f64);
        let err = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let s = t.sum(z)?;
                t.add_const(s, 3.0)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::zeros([3]);
        let r = grad_check(|t, x| t.sigmoid(x), &x, DEFAULT_EPS);
        assert!(matches!(r, Err(TensorError::NotScalar(_))));
    }
}
