//! Imbalance-aware multi-label objectives: Dice, focal, magnification and
//! their learnable hybrid.

use ptm_tensor::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossParams {
    /// `η = sigmoid(eta_raw)`.
    pub eta_raw: ParamId,
    /// `ω = softplus(omega_raw)`.
    pub omega_raw: ParamId,
    pub gamma: f64,
    pub eps: f64,
}

impl LossParams {
    /// Starts at `η = 0.5` and `ω = softplus(0) = ln 2`.
    pub fn init(store: &mut ParamStore, prefix: &str) -> Self {
        Self {
            eta_raw: store.add(format!("{prefix}.eta_raw"), Tensor::zeros([1]), true),
            omega_raw: store.add(format!("{prefix}.omega_raw"), Tensor::zeros([1]), true),
            gamma: 2.0,
            eps: 1.0,
        }
    }
}

/// Training objective choice, exposed for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    Hybrid,
    Dice,
    Focal,
    Bce,
}

fn check_shapes(tape: &Tape, a: Var, labels: &Tensor) -> Result<()> {
    let s = tape.value(a).shape();
    if s != labels.shape() || s.len() != 2 {
        return Err(data_err(format!(
            "prediction shape {s:?} differs from label shape {:?}",
            labels.shape()
        )));
    }
    Ok(())
}

/// `1 − (1/C)·Σ_c (2·Σ_i y p + ε)/(Σ_i y + Σ_i p + ε)` over `[N × C]` inputs.
pub fn dice_loss(tape: &mut Tape, probs: Var, labels: &Tensor, eps: f64) -> Result<Var> {
    check_shapes(tape, probs, labels)?;
    if tape.value(probs).data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(data_err("dice loss needs probabilities in [0, 1]"));
    }
    let c = labels.shape()[1];
    let y = tape.constant(labels.clone());
    let yp = tape.mul(y, probs)?;
    let inter = tape.sum_rows(yp)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_const(num, eps)?;
    let psum = tape.sum_rows(probs)?;
    let mut ysum = vec![0.0; c];
    for row in labels.data().chunks(c) {
        for (s, v) in ysum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let ysum = tape.constant(Tensor::new([c], ysum)?);
    let den = tape.add(psum, ysum)?;
    let den = tape.add_const(den, eps)?;
    let coef = tape.div(num, den)?;
    let m = tape.mean(coef)?;
    let neg = tape.neg(m)?;
    Ok(tape.add_const(neg, 1.0)?)
}

/// `−(1/N)·Σ [y(1−p)^γ ln p + (1−y) p^γ ln(1−p)]`.
pub fn focal_loss(tape: &mut Tape, probs: Var, labels: &Tensor, gamma: f64) -> Result<Var> {
    check_shapes(tape, probs, labels)?;
    let n = labels.shape()[0] as f64;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = tape.neg(p)?;
    let q = tape.add_const(q, 1.0)?;
    let ln_p = tape.ln(p)?;
    let ln_q = tape.ln(q)?;
    let (pos, neg) = if gamma == 0.0 {
        (ln_p, ln_q)
    } else {
        let wq = tape.powf(q, gamma)?;
        let wp = tape.powf(p, gamma)?;
        (tape.mul(wq, ln_p)?, tape.mul(wp, ln_q)?)
    };
    let y = tape.constant(labels.clone());
    let one_minus_y = tape.constant(labels.map(|v| 1.0 - v));
    let a = tape.mul(y, pos)?;
    let b = tape.mul(one_minus_y, neg)?;
    let t = tape.add(a, b)?;
    let s = tape.sum(t)?;
    Ok(tape.scale(s, -1.0 / n)?)
}

/// Mean of `sigmoid(logit)` over every entry.
pub fn magnification_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let s = tape.sigmoid(logits)?;
    Ok(tape.mean(s)?)
}

/// `η·(dice + ω·mag) + (1−η)·focal` on `probs = sigmoid(logits)`.
pub fn hybrid_loss(g: &mut Graph, logits: Var, labels: &Tensor, params: &LossParams) -> Result<Var> {
    check_shapes(&g.tape, logits, labels)?;
    let probs = g.tape.sigmoid(logits)?;
    let dice = dice_loss(&mut g.tape, probs, labels, params.eps)?;
    let focal = focal_loss(&mut g.tape, probs, labels, params.gamma)?;
    let mag = magnification_loss(&mut g.tape, logits)?;
    let eta_raw = g.param(params.eta_raw);
    let omega_raw = g.param(params.omega_raw);
    let eta = g.tape.sigmoid(eta_raw)?;
    let omega = g.tape.softplus(omega_raw)?;
    let one_minus_eta = g.tape.neg(eta)?;
    let one_minus_eta = g.tape.add_const(one_minus_eta, 1.0)?;
    let wm = g.tape.mul_scalar(mag, omega)?;
    let macro_ = g.tape.add(dice, wm)?;
    let a = g.tape.mul_scalar(macro_, eta)?;
    let b = g.tape.mul_scalar(focal, one_minus_eta)?;
    Ok(g.tape.add(a, b)?)
}

/// Mean binary cross-entropy computed from logits.
pub fn bce_loss(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    check_shapes(tape, logits, labels)?;
    let p = tape.sigmoid(logits)?;
    let f = focal_loss(tape, p, labels, 0.0)?;
    Ok(tape.scale(f, 1.0 / labels.shape()[1] as f64)?)
}

/// Dispatches on the configured objective.
pub fn training_loss(
    g: &mut Graph,
    variant: LossVariant,
    logits: Var,
    labels: &Tensor,
    params: &LossParams,
) -> Result<Var> {
    match variant {
        LossVariant::Hybrid => hybrid_loss(g, logits, labels, params),
        LossVariant::Dice => {
            let p = g.tape.sigmoid(logits)?;
            dice_loss(&mut g.tape, p, labels, params.eps)
        }
        LossVariant::Focal => {
            let p = g.tape.sigmoid(logits)?;
            focal_loss(&mut g.tape, p, labels, params.gamma)
        }
        LossVariant::Bce => bce_loss(&mut g.tape, logits, labels),
    }
}
