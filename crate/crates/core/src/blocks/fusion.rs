use ptm_tensor::rng::StreamRng;
use ptm_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use super::linear::Mlp2;
use crate::error::{data_err, Result};

/// Gated refinement of a primary modality by an auxiliary one:
/// `alpha·(sigmoid(MLP_g([Xp;Xa])) ⊙ Xp) + beta·MLP_r([Xp;Xa])`.
#[derive(Clone, Debug)]
pub struct BioCoupledFusion {
    pub gate: Mlp2,
    pub residual: Mlp2,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub d_p: usize,
    pub d_a: usize,
}

impl BioCoupledFusion {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, d_p: usize, d_a: usize) -> Self {
        let d = d_p + d_a;
        Self {
            gate: Mlp2::new(store, rng, &format!("{name}.gate"), d, d_p, d_p),
            residual: Mlp2::new(store, rng, &format!("{name}.residual"), d, d_p, d_p),
            alpha: store.add(format!("{name}.alpha"), Tensor::full([1], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::full([1], 0.5), true),
            d_p,
            d_a,
        }
    }

    pub fn forward(&self, g: &mut Graph, xp: Var, xa: Var) -> Result<Var> {
        let (sp, sa) = (g.value(xp).shape().to_vec(), g.value(xa).shape().to_vec());
        if sp.len() != 2 || sa.len() != 2 || sp[0] != sa[0] || sp[1] != self.d_p || sa[1] != self.d_a {
            return Err(data_err(format!(
                "fusion inputs {sp:?} and {sa:?} do not fit the layer"
            )));
        }
        let cat = g.tape.concat_last(xp, xa)?;
        let gate = self.gate.forward(g, cat)?;
        let gate = g.tape.sigmoid(gate)?;
        let phi = g.tape.mul(gate, xp)?;
        let psi = self.residual.forward(g, cat)?;
        let (alpha, beta) = (g.param(self.alpha), g.param(self.beta));
        let a = g.tape.mul_scalar(phi, alpha)?;
        let b = g.tape.mul_scalar(psi, beta)?;
        Ok(g.tape.add(a, b)?)
    }
}

/// Two reciprocal gates plus a residual path:
/// `α₀(g_s⊙H_s) + α₁(g_e⊙H_e) + α₂·MLP_r([H_s;H_e])`.
#[derive(Clone, Debug)]
pub struct DualGatedFusion {
    pub gate_sub: Mlp2,
    pub gate_enz: Mlp2,
    pub residual: Mlp2,
    pub alphas: [ParamId; 3],
    pub d: usize,
}

impl DualGatedFusion {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, d: usize) -> Self {
        let mut alpha = |i: usize| store.add(format!("{name}.alpha{i}"), Tensor::full([1], 1.0), true);
        let alphas = [alpha(0), alpha(1), alpha(2)];
        Self {
            gate_sub: Mlp2::new(store, rng, &format!("{name}.gate_sub"), 2 * d, d, d),
            gate_enz: Mlp2::new(store, rng, &format!("{name}.gate_enz"), 2 * d, d, d),
            residual: Mlp2::new(store, rng, &format!("{name}.residual"), 2 * d, d, d),
            alphas,
            d,
        }
    }

    /// Inputs are `[n × d]` row batches.
    pub fn forward(&self, g: &mut Graph, h_sub: Var, h_enz: Var) -> Result<Var> {
        let (ss, se) = (g.value(h_sub).shape().to_vec(), g.value(h_enz).shape().to_vec());
        if ss != se || ss.len() != 2 || ss[1] != self.d {
            return Err(data_err(format!("dual fusion inputs {ss:?} and {se:?} differ")));
        }
        let cat = g.tape.concat_last(h_sub, h_enz)?;
        let gs = self.gate_sub.forward(g, cat)?;
        let gs = g.tape.sigmoid(gs)?;
        let ge = self.gate_enz.forward(g, cat)?;
        let ge = g.tape.sigmoid(ge)?;
        let res = self.residual.forward(g, cat)?;
        let s = g.tape.mul(gs, h_sub)?;
        let e = g.tape.mul(ge, h_enz)?;
        let [a0, a1, a2] = self.alphas.map(|a| g.param(a));
        let s = g.tape.mul_scalar(s, a0)?;
        let e = g.tape.mul_scalar(e, a1)?;
        let r = g.tape.mul_scalar(res, a2)?;
        let se = g.tape.add(s, e)?;
        Ok(g.tape.add(se, r)?)
    }
}
